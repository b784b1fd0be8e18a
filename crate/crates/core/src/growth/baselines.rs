//! Non-trainable baselines: depth stacking and Net2Net width splitting.

use crate::error::{invalid, shape_err, Result};
use crate::packing::{check_growth, copy_leading_block};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transformer::{init_random, LayerParams, ModelConfig, ModelWeights};

/// Target layer `j` copies small layer `j mod L₁`; width is unchanged.
pub fn stack_depth(w: &ModelWeights, cfg: &ModelConfig, l2: usize) -> Result<ModelWeights> {
    w.check_shapes(cfg)?;
    if l2 < cfg.n_layers {
        return Err(invalid!("cannot stack {} layers down to {l2}", cfg.n_layers));
    }
    let mut out = w.clone();
    out.layers = (0..l2).map(|j| w.layers[j % cfg.n_layers].clone()).collect();
    Ok(out)
}

/// Unit mapping `g: [large] → [small]` with replication counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitMap {
    pub map: Vec<usize>,
    pub counts: Vec<usize>,
}

impl UnitMap {
    pub fn from_map(small: usize, map: Vec<usize>) -> Result<Self> {
        let mut counts = vec![0; small];
        for &u in &map {
            if u >= small {
                return Err(invalid!("unit {u} out of range for width {small}"));
            }
            counts[u] += 1;
        }
        Ok(Self { map, counts })
    }

    pub fn identity(n: usize) -> Self {
        Self { map: (0..n).collect(), counts: vec![1; n] }
    }

    /// Keeps units `0..small` and fills the rest with random existing units.
    pub fn random(small: usize, large: usize, rng: &mut Rng) -> Result<Self> {
        if large < small || small == 0 {
            return Err(invalid!("cannot map width {small} to {large}"));
        }
        let map = (0..large).map(|j| if j < small { j } else { rng.below(small) }).collect();
        Self::from_map(small, map)
    }

    /// Attention units: head `H` of the large model copies small head
    /// `π(H)` (first `n₁` kept, the rest random) and splits units inside
    /// it. Also returns, per large unit, its replication count within its
    /// own head.
    pub fn per_head(n1: usize, dk1: usize, n2: usize, dk2: usize, rng: &mut Rng) -> Result<(Self, Vec<usize>)> {
        let heads = Self::random(n1, n2, rng)?;
        let mut map = Vec::with_capacity(n2 * dk2);
        let mut local_counts = Vec::with_capacity(n2 * dk2);
        for &src in &heads.map {
            let local = Self::random(dk1, dk2, rng)?;
            map.extend(local.map.iter().map(|u| src * dk1 + u));
            local_counts.extend(local.map.iter().map(|&u| local.counts[u]));
        }
        Ok((Self::from_map(n1 * dk1, map)?, local_counts))
    }

    pub fn small(&self) -> usize {
        self.counts.len()
    }

    pub fn large(&self) -> usize {
        self.map.len()
    }
}

/// `W'[a, b] = W[rows(a), cols(b)] / count(rows(a))`.
///
/// Replicated input units split their outgoing weight, so `x' · W'` equals
/// `x · W` mapped through `cols` whenever `x'` replicates `x` through `rows`.
pub fn widen_matrix(w: &Tensor, rows: &UnitMap, cols: &UnitMap) -> Result<Tensor> {
    if w.shape() != [rows.small(), cols.small()] {
        return Err(shape_err!(
            "matrix {:?} does not match unit maps ({}, {})",
            w.shape(),
            rows.small(),
            cols.small()
        ));
    }
    let n = cols.small();
    let mut data = Vec::with_capacity(rows.large() * cols.large());
    for &r in &rows.map {
        let c = rows.counts[r] as f64;
        data.extend(cols.map.iter().map(|&k| w.data()[r * n + k] / c));
    }
    Tensor::new(vec![rows.large(), cols.large()], data)
}

fn gather(v: &Tensor, map: &UnitMap) -> Result<Tensor> {
    Tensor::new(vec![map.large()], map.map.iter().map(|&u| v.data()[u]).collect())
}

/// Divides each trailing-axis entry `j` by `div[j]`.
fn divide_last(t: &mut Tensor, div: &[usize]) {
    let width = div.len();
    for (j, x) in t.data_mut().iter_mut().enumerate() {
        *x /= div[j % width] as f64;
    }
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    t.permute(&[1, 0])
}

/// Widens every layer by splitting units.
///
/// Unit maps: the residual stream keeps units `0..D₁` and copies random
/// units for the rest; new heads copy existing heads and attention units
/// are split inside each head; FFN units likewise over `kD`. Keys are
/// divided by their replication count within the head and queries
/// rescaled by `sqrt(d_k₂ / d_k₁)` so scores are unchanged. Exact
/// preservation is lost only through layernorm statistics.
pub fn net2net_width(w: &ModelWeights, cfg1: &ModelConfig, cfg2: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    check_growth(cfg1, cfg2)?;
    w.check_shapes(cfg1)?;
    if cfg1.n_layers != cfg2.n_layers {
        return Err(invalid!("net2net widening keeps depth fixed"));
    }
    if cfg2.n_heads < cfg1.n_heads || cfg2.head_dim() < cfg1.head_dim() {
        return Err(invalid!(
            "net2net cannot shrink heads ({} x {} to {} x {})",
            cfg1.n_heads,
            cfg1.head_dim(),
            cfg2.n_heads,
            cfg2.head_dim()
        ));
    }
    let mut rng = Rng::new(seed);
    let g = UnitMap::random(cfg1.d_model, cfg2.d_model, &mut rng)?;
    let vocab = UnitMap::identity(cfg1.vocab);
    let score_scale = (cfg2.head_dim() as f64 / cfg1.head_dim() as f64).sqrt();

    let mut layers = Vec::with_capacity(cfg2.n_layers);
    for l in &w.layers {
        let (h, key_div) = UnitMap::per_head(cfg1.n_heads, cfg1.head_dim(), cfg2.n_heads, cfg2.head_dim(), &mut rng)?;
        let f = UnitMap::random(cfg1.ffn_dim(), cfg2.ffn_dim(), &mut rng)?;
        let mut w_k = widen_matrix(&l.w_k, &g, &h)?;
        divide_last(&mut w_k, &key_div);
        let mut b_k = gather(&l.b_k, &h)?;
        divide_last(&mut b_k, &key_div);
        layers.push(LayerParams {
            w_q: widen_matrix(&l.w_q, &g, &h)?.scale(score_scale),
            w_k,
            w_v: widen_matrix(&l.w_v, &g, &h)?,
            w_o: transpose(&widen_matrix(&transpose(&l.w_o)?, &h, &g)?)?,
            w_in: widen_matrix(&l.w_in, &g, &f)?,
            w_out: widen_matrix(&l.w_out, &f, &g)?,
            b_q: gather(&l.b_q, &h)?.scale(score_scale),
            b_k,
            b_v: gather(&l.b_v, &h)?,
            b_o: gather(&l.b_o, &g)?,
            b_in: gather(&l.b_in, &f)?,
            b_out: gather(&l.b_out, &g)?,
            ln1_g: gather(&l.ln1_g, &g)?,
            ln1_b: gather(&l.ln1_b, &g)?,
            ln2_g: gather(&l.ln2_g, &g)?,
            ln2_b: gather(&l.ln2_b, &g)?,
        });
    }

    let seq1 = UnitMap::identity(cfg1.seq_len);
    let mut pos_emb = widen_matrix(&w.pos_emb, &seq1, &g)?;
    if cfg2.seq_len > cfg1.seq_len {
        let extra = Tensor::randn_from(
            &mut rng,
            &[cfg2.seq_len - cfg1.seq_len, cfg2.d_model],
            1.0 / (cfg2.d_model as f64).sqrt(),
        )?;
        pos_emb = Tensor::concat(&[&pos_emb, &extra], 0)?;
    }
    Ok(ModelWeights {
        tok_emb: widen_matrix(&w.tok_emb, &vocab, &g)?,
        pos_emb,
        layers,
        lnf_g: gather(&w.lnf_g, &g)?,
        lnf_b: gather(&w.lnf_b, &g)?,
        head: match &w.head {
            Some(h) => Some(widen_matrix(h, &g, &vocab)?),
            None => None,
        },
        head_b: w.head_b.clone(),
    })
}

/// Copies every tensor into the leading block of a fresh random init at
/// the target width; depth is unchanged.
pub fn pad_width(w: &ModelWeights, cfg1: &ModelConfig, cfg2: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    check_growth(cfg1, cfg2)?;
    w.check_shapes(cfg1)?;
    if cfg1.n_layers != cfg2.n_layers {
        return Err(invalid!("padding keeps depth fixed"));
    }
    let mut out = init_random(cfg2, seed)?;
    for ((_, src), dst) in w.named().into_iter().zip(out.entries_mut()) {
        copy_leading_block(src, dst);
    }
    Ok(out)
}

/// Appends freshly initialized layers whose attention and FFN outputs are
/// zeroed, so each new block starts as the identity on the residual stream
/// (exactly so with pre-norm).
pub fn deepen_identity(w: &ModelWeights, cfg: &ModelConfig, l2: usize, seed: u64) -> Result<ModelWeights> {
    w.check_shapes(cfg)?;
    if l2 < cfg.n_layers {
        return Err(invalid!("cannot deepen {} layers down to {l2}", cfg.n_layers));
    }
    let fresh = init_random(&ModelConfig { n_layers: l2, ..cfg.clone() }, seed)?;
    let mut out = w.clone();
    for mut layer in fresh.layers.into_iter().skip(cfg.n_layers) {
        for t in [&mut layer.w_o, &mut layer.b_o, &mut layer.w_out, &mut layer.b_out] {
            *t = Tensor::zeros(t.shape())?;
        }
        out.layers.push(layer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{lm_loss, logits, TokenBatch};

    #[test]
    fn stacking_pattern() {
        let cfg = ModelConfig::new(2, 8, 2, 9, 4);
        let w = init_random(&cfg, 1).unwrap();
        let s = stack_depth(&w, &cfg, 4).unwrap();
        for (j, src) in [0, 1, 0, 1].iter().enumerate() {
            assert_eq!(s.layers[j], w.layers[*src]);
        }
        assert_eq!(stack_depth(&w, &cfg, 2).unwrap(), w);
        assert!(stack_depth(&w, &cfg, 1).is_err());
        let cfg4 = ModelConfig { n_layers: 4, ..cfg.clone() };
        let toks = TokenBatch::new(1, 4, vec![1, 2, 3, 4]).unwrap();
        assert!(lm_loss(&s, &cfg4, &toks).unwrap().is_finite());
    }

    #[test]
    fn linear_chain_is_preserved() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[5, 3], 1, 1.0).unwrap();
        let w1 = Tensor::randn(&[3, 4], 2, 1.0).unwrap();
        let w2 = Tensor::randn(&[4, 2], 3, 1.0).unwrap();
        let w3 = Tensor::randn(&[2, 3], 4, 1.0).unwrap();
        let m1 = UnitMap::random(4, 9, &mut rng).unwrap();
        let m2 = UnitMap::random(2, 5, &mut rng).unwrap();
        let id_in = UnitMap::identity(3);
        let id_out = UnitMap::identity(3);
        let small = x.matmul(&w1).unwrap().matmul(&w2).unwrap().matmul(&w3).unwrap();
        let big = x
            .matmul(&widen_matrix(&w1, &id_in, &m1).unwrap())
            .unwrap()
            .matmul(&widen_matrix(&w2, &m1, &m2).unwrap())
            .unwrap()
            .matmul(&widen_matrix(&w3, &m2, &id_out).unwrap())
            .unwrap();
        assert!(small.max_abs_diff(&big) < 1e-12);
    }

    #[test]
    fn equal_width_is_identity() {
        let cfg = ModelConfig::new(2, 8, 2, 9, 4);
        let w = init_random(&cfg, 2).unwrap();
        assert_eq!(net2net_width(&w, &cfg, &cfg, 5).unwrap(), w);
    }

    #[test]
    fn widening_is_deterministic_and_close() {
        let c1 = ModelConfig::new(2, 8, 2, 9, 4);
        let c2 = ModelConfig { d_model: 16, ..c1.clone() };
        let w = init_random(&c1, 3).unwrap();
        let a = net2net_width(&w, &c1, &c2, 7).unwrap();
        assert_eq!(a, net2net_width(&w, &c1, &c2, 7).unwrap());
        a.check_shapes(&c2).unwrap();
        let toks = TokenBatch::new(2, 4, vec![1, 2, 3, 4, 8, 7, 6, 5]).unwrap();
        let (l1, l2) = (logits(&w, &c1, &toks).unwrap(), logits(&a, &c2, &toks).unwrap());
        assert!(l2.all_finite() && l1.shape() == l2.shape());
        assert!(net2net_width(&a, &c2, &c1, 0).is_err());
    }

    #[test]
    fn unit_map_counts() {
        let m = UnitMap::from_map(3, vec![0, 1, 2, 1, 1]).unwrap();
        assert_eq!(m.counts, vec![1, 3, 1]);
        assert!(UnitMap::from_map(2, vec![0, 2]).is_err());
        let mut rng = Rng::new(0);
        let (h, local) = UnitMap::per_head(2, 2, 2, 3, &mut rng).unwrap();
        assert!(h.map[..3].iter().all(|&u| u < 2) && h.map[3..].iter().all(|&u| (2..4).contains(&u)));
        assert_eq!(local.len(), 6);
        assert!(local.chunks(3).all(|c| c.iter().sum::<usize>() == 5));
    }

    fn cols(x: &Tensor, map: &UnitMap) -> Tensor {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let data = (0..n).flat_map(|i| map.map.iter().map(move |&u| x.data()[i * d + u])).collect();
        Tensor::new(vec![n, map.large()], data).unwrap()
    }

    fn head_scores(x: &Tensor, wq: &Tensor, wk: &Tensor, head: usize, dk: usize) -> Tensor {
        let q = x.matmul(wq).unwrap().narrow(1, head * dk, dk).unwrap();
        let k = x.matmul(wk).unwrap().narrow(1, head * dk, dk).unwrap();
        q.matmul(&k.transpose2().unwrap()).unwrap().scale(1.0 / (dk as f64).sqrt())
    }

    #[test]
    fn replicated_heads_keep_scores_and_values() {
        let c1 = ModelConfig::new(1, 8, 2, 9, 4);
        let c2 = ModelConfig::new(1, 20, 4, 9, 4);
        let w = init_random(&c1, 4).unwrap();
        let big = net2net_width(&w, &c1, &c2, 11).unwrap();
        let mut rng = Rng::new(11);
        let g = UnitMap::random(8, 20, &mut rng).unwrap();
        let (h, _) = UnitMap::per_head(2, 4, 4, 5, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 9, 1.0).unwrap();
        let xg = cols(&x, &g);
        let (s, l) = (&w.layers[0], &big.layers[0]);
        for head in 0..4 {
            let src = h.map[head * 5] / 4;
            let a = head_scores(&x, &s.w_q, &s.w_k, src, 4);
            let b = head_scores(&xg, &l.w_q, &l.w_k, head, 5);
            assert!(a.max_abs_diff(&b) < 1e-12, "head {head}");
        }
        let ctx = x.matmul(&s.w_v).unwrap();
        let ctx_big = xg.matmul(&l.w_v).unwrap();
        assert!(cols(&ctx, &h).max_abs_diff(&ctx_big) < 1e-12);
        let out = ctx.matmul(&s.w_o.transpose2().unwrap()).unwrap();
        let out_big = ctx_big.matmul(&l.w_o.transpose2().unwrap()).unwrap();
        assert!(cols(&out, &g).max_abs_diff(&out_big) < 1e-12);
        assert!(net2net_width(&w, &c1, &ModelConfig::new(1, 12, 1, 9, 4), 0).is_err());
    }

    #[test]
    fn identity_layers_preserve_logits() {
        let cfg = ModelConfig::new(2, 8, 2, 9, 4);
        let w = init_random(&cfg, 5).unwrap();
        let deep = deepen_identity(&w, &cfg, 5, 1).unwrap();
        let cfg5 = ModelConfig { n_layers: 5, ..cfg.clone() };
        let toks = TokenBatch::new(2, 4, vec![1, 2, 3, 4, 8, 7, 6, 5]).unwrap();
        let (a, b) = (logits(&w, &cfg, &toks).unwrap(), logits(&deep, &cfg5, &toks).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert_eq!(&deep.layers[..2], &w.layers[..]);
        assert!(deepen_identity(&w, &cfg, 1, 0).is_err());
    }

    #[test]
    fn padding_copies_leading_blocks() {
        let c1 = ModelConfig::new(2, 8, 2, 9, 4);
        let c2 = ModelConfig { d_model: 12, n_heads: 3, seq_len: 6, ..c1.clone() };
        let w = init_random(&c1, 6).unwrap();
        let p = pad_width(&w, &c1, &c2, 2).unwrap();
        p.check_shapes(&c2).unwrap();
        assert_eq!(p.tok_emb.narrow(1, 0, 8).unwrap(), w.tok_emb);
        assert_eq!(p.layers[1].w_in.narrow(0, 0, 8).unwrap().narrow(1, 0, 32).unwrap(), w.layers[1].w_in);
        assert_eq!(p.layers[0].ln1_g.narrow(0, 8, 4).unwrap(), Tensor::full(&[4], 1.0).unwrap());
        assert_eq!(pad_width(&w, &c1, &c1, 9).unwrap(), w);
    }
}
