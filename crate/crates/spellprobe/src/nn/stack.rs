//! Pre-LN transformer stack with hand-written gradients.
//!
//! Block structure: x + Attn(LN(x)) followed by x + FFN(LN(x)), final LN,
//! linear output head. Supports causal (probe) and bidirectional (MLM)
//! attention, an optional learned input projection that turns an external
//! embedding row into the position-0 "prefix" input, and an optional
//! trainable prefix table for the embedding-pretraining mode.
//!
//! Dropout (inverted, rate from config) is applied at exactly three sites:
//! embedding outputs, attention probabilities, and FFN activations. It is
//! active only when a dropout RNG is supplied.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::batch::{PackedBatch, NO_TARGET, PREFIX_INPUT};
use super::store::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;
const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Symbol embedding rows (characters for the probe, tokens for MLM).
    pub vocab_in: usize,
    /// Output head width.
    pub vocab_out: usize,
    pub max_positions: usize,
    pub causal: bool,
    pub dropout: f64,
    /// Some(d_emb): prefix rows are projected d_emb → d_model.
    pub prefix_dim: Option<usize>,
    /// Some(v): a trainable v×d_emb prefix table lives in the store and
    /// prefix rows gather from it by token id (embedding-pretraining mode).
    pub tunable_prefix: Option<usize>,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Stack {
    pub cfg: StackConfig,
    pub store: ParamStore,
    embed: ParamId,
    pos: ParamId,
    proj: Option<(ParamId, ParamId)>,
    prefix_table: Option<ParamId>,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Stack {
    /// Build and initialize: weights N(0, 0.02²), biases 0, LN gains 1,
    /// deterministic in `seed`.
    pub fn build(cfg: StackConfig, seed: u64) -> Stack {
        assert_eq!(cfg.d_model % cfg.heads, 0, "d_model must divide into heads");
        if cfg.tunable_prefix.is_some() {
            assert!(cfg.prefix_dim.is_some(), "tunable prefix requires prefix_dim");
        }
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let mut normal_init = Vec::new();

        let embed = store.add("embed", &[cfg.vocab_in, d]);
        normal_init.push(embed);
        let pos = store.add("pos", &[cfg.max_positions, d]);
        normal_init.push(pos);
        let proj = cfg.prefix_dim.map(|d_emb| {
            let w = store.add("proj.w", &[d_emb, d]);
            normal_init.push(w);
            let b = store.add("proj.b", &[d]);
            (w, b)
        });
        let prefix_table = cfg.tunable_prefix.map(|v| {
            let t = store.add("prefix_table", &[v, cfg.prefix_dim.unwrap()]);
            normal_init.push(t);
            t
        });

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut w = |name: &str, shape: &[usize], init: bool| {
                let id = store.add(format!("layer{l}.{name}"), shape);
                if init {
                    normal_init.push(id);
                }
                id
            };
            let ids = LayerIds {
                ln1_g: w("ln1.g", &[d], false),
                ln1_b: w("ln1.b", &[d], false),
                wq: w("attn.wq", &[d, d], true),
                bq: w("attn.bq", &[d], false),
                wk: w("attn.wk", &[d, d], true),
                bk: w("attn.bk", &[d], false),
                wv: w("attn.wv", &[d, d], true),
                bv: w("attn.bv", &[d], false),
                wo: w("attn.wo", &[d, d], true),
                bo: w("attn.bo", &[d], false),
                ln2_g: w("ln2.g", &[d], false),
                ln2_b: w("ln2.b", &[d], false),
                w1: w("ffn.w1", &[d, cfg.ffn_dim], true),
                b1: w("ffn.b1", &[cfg.ffn_dim], false),
                w2: w("ffn.w2", &[cfg.ffn_dim, d], true),
                b2: w("ffn.b2", &[d], false),
            };
            layers.push(ids);
        }
        let lnf_g = store.add("lnf.g", &[d]);
        let lnf_b = store.add("lnf.b", &[d]);
        let out_w = store.add("out.w", &[d, cfg.vocab_out]);
        normal_init.push(out_w);
        let out_b = store.add("out.b", &[cfg.vocab_out]);

        let mut rng = crate::seeding::stream(seed, "stack-init", &[]);
        for id in normal_init {
            store.init_normal(id, INIT_SD, &mut rng);
        }
        for l in &layers {
            store.init_const(l.ln1_g, 1.0);
            store.init_const(l.ln2_g, 1.0);
        }
        store.init_const(lnf_g, 1.0);

        Stack {
            cfg,
            store,
            embed,
            pos,
            proj,
            prefix_table,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        }
    }

    pub fn prefix_table_id(&self) -> Option<ParamId> {
        self.prefix_table
    }

    /// Closed-form parameter count, for cross-checking construction.
    pub fn expected_n_params(cfg: &StackConfig) -> usize {
        let d = cfg.d_model;
        let per_layer = 2 * d                      // ln1
            + 4 * (d * d + d)                      // q,k,v,o projections
            + 2 * d                                // ln2
            + d * cfg.ffn_dim + cfg.ffn_dim        // w1,b1
            + cfg.ffn_dim * d + d; // w2,b2
        cfg.vocab_in * d
            + cfg.max_positions * d
            + cfg.prefix_dim.map_or(0, |e| e * d + d)
            + cfg.tunable_prefix.map_or(0, |v| v * cfg.prefix_dim.unwrap())
            + cfg.layers * per_layer
            + 2 * d
            + d * cfg.vocab_out
            + cfg.vocab_out
    }
}

// ---------------------------------------------------------------------------
// forward caches
// ---------------------------------------------------------------------------

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax outputs per (seq, head), flattened seq*heads + head.
    probs: Vec<Array2<f64>>,
    attn_masks: Option<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

pub struct Forward {
    /// Prefix source rows actually used (gathered in tunable mode).
    prefix_src: Array2<f64>,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Array2<f64>,
    pub logits: Array2<f64>,
}

fn ln_forward(x: &Array2<f64>, g: &[f64], b: &[f64]) -> (Array2<f64>, LnCache) {
    let d = x.ncols();
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std[r] = is;
    }
    let mut out = xhat.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[j] + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// dL/dx for y = g·xhat + b given dL/dy; accumulates dg/db.
fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dy_r = dy.row(r);
        let xhat_r = cache.xhat.row(r);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..dy.ncols() {
            let dxh = dy_r[j] * g[j];
            dg[j] += dy_r[j] * xhat_r[j];
            db[j] += dy_r[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_r[j];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        let is = cache.inv_std[r];
        for j in 0..dy.ncols() {
            let dxh = dy_r[j] * g[j];
            dx[[r, j]] = is * (dxh - mean_dxhat - xhat_r[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn ln_output(cache: &LnCache, g: &[f64], b: &[f64]) -> Array2<f64> {
    let mut out = cache.xhat.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[j] + b[j];
        }
    }
    out
}

fn add_row_bias(x: &mut Array2<f64>, b: &[f64]) {
    for mut row in x.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b[j];
        }
    }
}

fn sample_mask<R: Rng>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn(shape, || {
        if rng.random_bool(keep) {
            scale
        } else {
            0.0
        }
    })
}

impl Stack {
    /// Forward pass over a packed batch. Dropout is active iff `dropout_rng`
    /// is supplied and cfg.dropout > 0.
    pub fn forward(&self, batch: &PackedBatch, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Forward {
        batch.validate();
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rows = batch.n_rows();
        let positions = batch.positions();
        let drop_p = cfg.dropout;
        let dropping = drop_p > 0.0 && dropout_rng.is_some();

        // -- input assembly -------------------------------------------------
        let embed = self.store.view2(self.embed);
        let pos = self.store.view2(self.pos);
        let mut x0 = Array2::zeros((rows, d));
        let mut prefix_rows = Vec::new();
        for r in 0..rows {
            assert!(
                positions[r] < cfg.max_positions,
                "sequence length exceeds positional table"
            );
            if batch.inputs[r] == PREFIX_INPUT {
                prefix_rows.push(r);
                x0.row_mut(r).assign(&pos.row(positions[r]));
            } else {
                let sym = batch.inputs[r] as usize;
                let mut row = x0.row_mut(r);
                row.assign(&embed.row(sym));
                row += &pos.row(positions[r]);
            }
        }
        let prefix_src = if prefix_rows.is_empty() {
            Array2::zeros((0, 0))
        } else if let Some(table) = self.prefix_table {
            let tbl = self.store.view2(table);
            let mut src = Array2::zeros((prefix_rows.len(), tbl.ncols()));
            for (i, &tok) in batch.prefix_token_ids.iter().enumerate() {
                src.row_mut(i).assign(&tbl.row(tok as usize));
            }
            src
        } else {
            assert_eq!(
                batch.prefix.nrows(),
                prefix_rows.len(),
                "frozen-prefix mode needs materialized prefix rows"
            );
            batch.prefix.clone()
        };
        if !prefix_rows.is_empty() {
            let (w, b) = self.proj.expect("prefix rows require an input projection");
            let mut projected = prefix_src.dot(&self.store.view2(w));
            add_row_bias(&mut projected, self.store.param(b));
            for (i, &r) in prefix_rows.iter().enumerate() {
                let mut row = x0.row_mut(r);
                row += &projected.row(i);
            }
        }

        // dropout site 1: embedding outputs
        let emb_mask = dropping.then(|| sample_mask((rows, d), drop_p, dropout_rng.as_deref_mut().unwrap()));
        if let Some(m) = &emb_mask {
            x0 *= m;
        }

        // -- transformer blocks ---------------------------------------------
        let mut x = x0;
        let mut layer_caches = Vec::with_capacity(cfg.layers);
        for l in &self.layers {
            let (a, ln1) = ln_forward(&x, self.store.param(l.ln1_g), self.store.param(l.ln1_b));
            let mut q = a.dot(&self.store.view2(l.wq));
            add_row_bias(&mut q, self.store.param(l.bq));
            let mut k = a.dot(&self.store.view2(l.wk));
            add_row_bias(&mut k, self.store.param(l.bk));
            let mut v = a.dot(&self.store.view2(l.wv));
            add_row_bias(&mut v, self.store.param(l.bv));

            let mut ctx = Array2::zeros((rows, d));
            let mut probs_cache = Vec::with_capacity(batch.n_seqs() * heads);
            let mut mask_cache = dropping.then(Vec::new);
            for sidx in 0..batch.n_seqs() {
                let range = batch.seq_range(sidx);
                for h in 0..heads {
                    let cols = h * hd..(h + 1) * hd;
                    let qs = q.slice(s![range.clone(), cols.clone()]);
                    let ks = k.slice(s![range.clone(), cols.clone()]);
                    let vs = v.slice(s![range.clone(), cols.clone()]);
                    let mut scores = qs.dot(&ks.t());
                    scores *= scale;
                    if cfg.causal {
                        let t = scores.nrows();
                        for i in 0..t {
                            for j in i + 1..t {
                                scores[[i, j]] = f64::NEG_INFINITY;
                            }
                        }
                    }
                    // softmax rows
                    for mut srow in scores.rows_mut() {
                        let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for val in srow.iter_mut() {
                            *val = (*val - max).exp();
                            sum += *val;
                        }
                        srow.mapv_inplace(|val| val / sum);
                    }
                    let probs = scores;
                    // dropout site 2: attention probabilities
                    let used = if dropping {
                        let m = sample_mask(probs.dim(), drop_p, dropout_rng.as_deref_mut().unwrap());
                        let used = &probs * &m;
                        mask_cache.as_mut().unwrap().push(m);
                        used
                    } else {
                        probs.clone()
                    };
                    ctx.slice_mut(s![range.clone(), cols]).assign(&used.dot(&vs));
                    probs_cache.push(probs);
                }
            }
            let mut o = ctx.dot(&self.store.view2(l.wo));
            add_row_bias(&mut o, self.store.param(l.bo));
            let x_mid = &x + &o;

            let (b2a, ln2) = ln_forward(&x_mid, self.store.param(l.ln2_g), self.store.param(l.ln2_b));
            let mut h_pre = b2a.dot(&self.store.view2(l.w1));
            add_row_bias(&mut h_pre, self.store.param(l.b1));
            let mut h_act = h_pre.mapv(|v| v.max(0.0));
            // dropout site 3: FFN activations
            let ffn_mask = dropping.then(|| sample_mask(h_act.dim(), drop_p, dropout_rng.as_deref_mut().unwrap()));
            if let Some(m) = &ffn_mask {
                h_act *= m;
            }
            let mut f = h_act.dot(&self.store.view2(l.w2));
            add_row_bias(&mut f, self.store.param(l.b2));
            let x_out = &x_mid + &f;

            layer_caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs: probs_cache,
                attn_masks: mask_cache,
                ctx,
                ln2,
                h_pre,
                h_act,
                ffn_mask,
            });
            x = x_out;
        }

        let (y, lnf) = ln_forward(&x, self.store.param(self.lnf_g), self.store.param(self.lnf_b));
        let mut logits = y.dot(&self.store.view2(self.out_w));
        add_row_bias(&mut logits, self.store.param(self.out_b));

        Forward {
            prefix_src,
            emb_mask,
            layers: layer_caches,
            lnf,
            y,
            logits,
        }
    }

    /// Logits only, no gradient caches. Use for decoding/evaluation where
    /// `forward`'s per-layer activation retention would dominate memory.
    pub fn infer_logits(&self, batch: &PackedBatch) -> Array2<f64> {
        batch.validate();
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rows = batch.n_rows();
        let positions = batch.positions();

        let embed = self.store.view2(self.embed);
        let pos = self.store.view2(self.pos);
        let mut x = Array2::zeros((rows, d));
        let mut prefix_rows = Vec::new();
        for r in 0..rows {
            assert!(positions[r] < cfg.max_positions, "sequence length exceeds positional table");
            if batch.inputs[r] == PREFIX_INPUT {
                prefix_rows.push(r);
                x.row_mut(r).assign(&pos.row(positions[r]));
            } else {
                let mut row = x.row_mut(r);
                row.assign(&embed.row(batch.inputs[r] as usize));
                row += &pos.row(positions[r]);
            }
        }
        if !prefix_rows.is_empty() {
            let (w, b) = self.proj.expect("prefix rows require an input projection");
            let src = if let Some(table) = self.prefix_table {
                let tbl = self.store.view2(table);
                let mut src = Array2::zeros((prefix_rows.len(), tbl.ncols()));
                for (i, &tok) in batch.prefix_token_ids.iter().enumerate() {
                    src.row_mut(i).assign(&tbl.row(tok as usize));
                }
                src
            } else {
                batch.prefix.clone()
            };
            let mut projected = src.dot(&self.store.view2(w));
            add_row_bias(&mut projected, self.store.param(b));
            for (i, &r) in prefix_rows.iter().enumerate() {
                let mut row = x.row_mut(r);
                row += &projected.row(i);
            }
        }

        for l in &self.layers {
            let (a, _) = ln_forward(&x, self.store.param(l.ln1_g), self.store.param(l.ln1_b));
            let mut q = a.dot(&self.store.view2(l.wq));
            add_row_bias(&mut q, self.store.param(l.bq));
            let mut k = a.dot(&self.store.view2(l.wk));
            add_row_bias(&mut k, self.store.param(l.bk));
            let mut v = a.dot(&self.store.view2(l.wv));
            add_row_bias(&mut v, self.store.param(l.bv));
            let mut ctx = Array2::zeros((rows, d));
            for sidx in 0..batch.n_seqs() {
                let range = batch.seq_range(sidx);
                for h in 0..heads {
                    let cols = h * hd..(h + 1) * hd;
                    let qs = q.slice(s![range.clone(), cols.clone()]);
                    let ks = k.slice(s![range.clone(), cols.clone()]);
                    let vs = v.slice(s![range.clone(), cols.clone()]);
                    let mut scores = qs.dot(&ks.t());
                    scores *= scale;
                    if cfg.causal {
                        let t = scores.nrows();
                        for i in 0..t {
                            for j in i + 1..t {
                                scores[[i, j]] = f64::NEG_INFINITY;
                            }
                        }
                    }
                    for mut srow in scores.rows_mut() {
                        let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for val in srow.iter_mut() {
                            *val = (*val - max).exp();
                            sum += *val;
                        }
                        srow.mapv_inplace(|val| val / sum);
                    }
                    ctx.slice_mut(s![range.clone(), cols]).assign(&scores.dot(&vs));
                }
            }
            let mut o = ctx.dot(&self.store.view2(l.wo));
            add_row_bias(&mut o, self.store.param(l.bo));
            let x_mid = &x + &o;

            let (b2a, _) = ln_forward(&x_mid, self.store.param(l.ln2_g), self.store.param(l.ln2_b));
            let mut h = b2a.dot(&self.store.view2(l.w1));
            add_row_bias(&mut h, self.store.param(l.b1));
            h.mapv_inplace(|val| val.max(0.0));
            let mut f = h.dot(&self.store.view2(l.w2));
            add_row_bias(&mut f, self.store.param(l.b2));
            x = x_mid + f;
        }
        let (y, _) = ln_forward(&x, self.store.param(self.lnf_g), self.store.param(self.lnf_b));
        let mut logits = y.dot(&self.store.view2(self.out_w));
        add_row_bias(&mut logits, self.store.param(self.out_b));
        logits
    }

    /// Mean cross-entropy over rows with a target. Returns 0 for a batch
    /// with no targets.
    pub fn loss(&self, batch: &PackedBatch, fwd: &Forward) -> f64 {
        self.loss_from_logits(batch, &fwd.logits)
    }

    pub fn loss_from_logits(&self, batch: &PackedBatch, logits: &Array2<f64>) -> f64 {
        let mut loss = 0.0;
        let mut n = 0usize;
        for (r, &t) in batch.targets.iter().enumerate() {
            if t == NO_TARGET {
                continue;
            }
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t as usize];
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            loss / n as f64
        }
    }

    /// Forward + loss + full backward; gradients accumulate into
    /// `store.grad` (call `store.zero_grad()` first for fresh gradients).
    pub fn loss_and_grads(
        &mut self,
        batch: &PackedBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> f64 {
        let fwd = self.forward(batch, dropout_rng);
        let loss = self.loss(batch, &fwd);
        self.backward(batch, &fwd);
        loss
    }

    fn backward(&mut self, batch: &PackedBatch, fwd: &Forward) {
        let cfg = self.cfg;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rows = batch.n_rows();
        let n_targets = batch.n_targets();
        if n_targets == 0 {
            return;
        }

        // -- cross-entropy --------------------------------------------------
        let mut dlogits = Array2::zeros(fwd.logits.raw_dim());
        let inv_n = 1.0 / n_targets as f64;
        for (r, &t) in batch.targets.iter().enumerate() {
            if t == NO_TARGET {
                continue;
            }
            let row = fwd.logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for e in &mut exps {
                *e /= sum;
            }
            let mut drow = dlogits.row_mut(r);
            for (j, p) in exps.iter().enumerate() {
                drow[j] = p * inv_n;
            }
            drow[t as usize] -= inv_n;
        }

        // -- output head -----------------------------------------------------
        {
            let dw = fwd.y.t().dot(&dlogits);
            let mut g = self.store.grad2_mut(self.out_w);
            g += &dw;
            let dbias = dlogits.sum_axis(Axis(0));
            let mut g = self.store.grad1_mut(self.out_b);
            g += &dbias;
        }
        let dy = dlogits.dot(&self.store.view2(self.out_w).t());
        let mut dx = {
            let (lnf_g, lnf_b) = (self.lnf_g, self.lnf_b);
            let g_vals = self.store.param(lnf_g).to_vec();
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let dx = ln_backward(&dy, &fwd.lnf, &g_vals, &mut dg, &mut db);
            self.add_grad(lnf_g, &dg);
            self.add_grad(lnf_b, &db);
            dx
        };

        // -- transformer blocks, reversed -------------------------------------
        for (l, cache) in self.layers.clone().iter().zip(fwd.layers.iter()).rev() {
            // FFN branch: x_out = x_mid + f(ln2(x_mid))
            let d_f = &dx;
            {
                let dw2 = cache.h_act.t().dot(d_f);
                let mut g = self.store.grad2_mut(l.w2);
                g += &dw2;
                let db2 = d_f.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(l.b2);
                g += &db2;
            }
            let mut d_h = d_f.dot(&self.store.view2(l.w2).t());
            if let Some(m) = &cache.ffn_mask {
                d_h *= m;
            }
            // ReLU
            ndarray::Zip::from(&mut d_h).and(&cache.h_pre).for_each(|g, &pre| {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            });
            {
                let b2a = ln_output(&cache.ln2, self.store.param(l.ln2_g), self.store.param(l.ln2_b));
                let dw1 = b2a.t().dot(&d_h);
                let mut g = self.store.grad2_mut(l.w1);
                g += &dw1;
                let db1 = d_h.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(l.b1);
                g += &db1;
            }
            let d_ln2out = d_h.dot(&self.store.view2(l.w1).t());
            let d_x_mid_ln = {
                let g_vals = self.store.param(l.ln2_g).to_vec();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let out = ln_backward(&d_ln2out, &cache.ln2, &g_vals, &mut dg, &mut db);
                self.add_grad(l.ln2_g, &dg);
                self.add_grad(l.ln2_b, &db);
                out
            };
            let d_x_mid = &dx + &d_x_mid_ln;

            // attention branch: x_mid = x_in + o(ln1(x_in))
            let d_o = &d_x_mid;
            {
                let dwo = cache.ctx.t().dot(d_o);
                let mut g = self.store.grad2_mut(l.wo);
                g += &dwo;
                let dbo = d_o.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(l.bo);
                g += &dbo;
            }
            let d_ctx = d_o.dot(&self.store.view2(l.wo).t());

            let mut dq = Array2::zeros((rows, d));
            let mut dk = Array2::zeros((rows, d));
            let mut dv = Array2::zeros((rows, d));
            for sidx in 0..batch.n_seqs() {
                let range = batch.seq_range(sidx);
                for h in 0..heads {
                    let cols = h * hd..(h + 1) * hd;
                    let probs = &cache.probs[sidx * heads + h];
                    let vs = cache.v.slice(s![range.clone(), cols.clone()]);
                    let qs = cache.q.slice(s![range.clone(), cols.clone()]);
                    let ks = cache.k.slice(s![range.clone(), cols.clone()]);
                    let d_ctx_h = d_ctx.slice(s![range.clone(), cols.clone()]);

                    let (used, d_used) = if let Some(masks) = &cache.attn_masks {
                        let m = &masks[sidx * heads + h];
                        ((probs * m), d_ctx_h.dot(&vs.t()) * m)
                    } else {
                        (probs.clone(), d_ctx_h.dot(&vs.t()))
                    };
                    let dv_h = used.t().dot(&d_ctx_h);
                    let mut slot = dv.slice_mut(s![range.clone(), cols.clone()]);
                    slot += &dv_h;

                    // softmax backward (rows of probs sum to 1; masked
                    // entries are exactly 0 and stay 0)
                    let mut d_scores = Array2::zeros(probs.raw_dim());
                    for i in 0..probs.nrows() {
                        let p_i = probs.row(i);
                        let du_i = d_used.row(i);
                        let dot = p_i.dot(&du_i);
                        for j in 0..probs.ncols() {
                            d_scores[[i, j]] = p_i[j] * (du_i[j] - dot);
                        }
                    }
                    d_scores *= scale;

                    let dq_h = d_scores.dot(&ks);
                    let mut slot = dq.slice_mut(s![range.clone(), cols.clone()]);
                    slot += &dq_h;
                    let dk_h = d_scores.t().dot(&qs);
                    let mut slot = dk.slice_mut(s![range.clone(), cols]);
                    slot += &dk_h;
                }
            }

            let a = ln_output(&cache.ln1, self.store.param(l.ln1_g), self.store.param(l.ln1_b));
            {
                let dwq = a.t().dot(&dq);
                let mut g = self.store.grad2_mut(l.wq);
                g += &dwq;
                let dwk = a.t().dot(&dk);
                let mut g = self.store.grad2_mut(l.wk);
                g += &dwk;
                let dwv = a.t().dot(&dv);
                let mut g = self.store.grad2_mut(l.wv);
                g += &dwv;
                let dbq = dq.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(l.bq);
                g += &dbq;
                let dbk = dk.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(l.bk);
                g += &dbk;
                let dbv = dv.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(l.bv);
                g += &dbv;
            }
            let d_a = dq.dot(&self.store.view2(l.wq).t())
                + dk.dot(&self.store.view2(l.wk).t())
                + dv.dot(&self.store.view2(l.wv).t());
            let d_x_in_ln = {
                let g_vals = self.store.param(l.ln1_g).to_vec();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let out = ln_backward(&d_a, &cache.ln1, &g_vals, &mut dg, &mut db);
                self.add_grad(l.ln1_g, &dg);
                self.add_grad(l.ln1_b, &db);
                out
            };
            dx = d_x_mid + d_x_in_ln;
        }

        // -- embedding assembly ------------------------------------------------
        if let Some(m) = &fwd.emb_mask {
            dx *= m;
        }
        let positions = batch.positions();
        let mut prefix_row_grads: Vec<(usize, usize)> = Vec::new(); // (prefix idx, row)
        {
            let mut n_prefix = 0usize;
            let embed = self.embed;
            let pos = self.pos;
            for r in 0..rows {
                if batch.inputs[r] == PREFIX_INPUT {
                    prefix_row_grads.push((n_prefix, r));
                    n_prefix += 1;
                } else {
                    let sym = batch.inputs[r] as usize;
                    let spec_off = self.store.spec(embed).offset + sym * d;
                    for j in 0..d {
                        self.store.grad[spec_off + j] += dx[[r, j]];
                    }
                }
                let pos_off = self.store.spec(pos).offset + positions[r] * d;
                for j in 0..d {
                    self.store.grad[pos_off + j] += dx[[r, j]];
                }
            }
        }
        if !prefix_row_grads.is_empty() {
            let (w, b) = self.proj.expect("prefix rows require an input projection");
            let mut d_projout = Array2::zeros((prefix_row_grads.len(), d));
            for &(i, r) in &prefix_row_grads {
                d_projout.row_mut(i).assign(&dx.row(r));
            }
            {
                let dw = fwd.prefix_src.t().dot(&d_projout);
                let mut g = self.store.grad2_mut(w);
                g += &dw;
                let db = d_projout.sum_axis(Axis(0));
                let mut g = self.store.grad1_mut(b);
                g += &db;
            }
            if let Some(table) = self.prefix_table {
                let d_src = d_projout.dot(&self.store.view2(w).t());
                let d_emb = self.store.spec(table).shape[1];
                let off = self.store.spec(table).offset;
                for (i, &tok) in batch.prefix_token_ids.iter().enumerate() {
                    let row_off = off + tok as usize * d_emb;
                    for j in 0..d_emb {
                        self.store.grad[row_off + j] += d_src[[i, j]];
                    }
                }
            }
        }
    }

    fn add_grad(&mut self, id: ParamId, values: &[f64]) {
        for (g, v) in self.store.grad_mut(id).iter_mut().zip(values) {
            *g += v;
        }
    }
}
