//! Hierarchical segment-context scorer.
//!
//! Frames are projected and position-embedded, pooled into one token per
//! segment, contextualized by a pre-norm transformer over segment tokens,
//! fused back into frames through a learned gate, and refined by a residual
//! stack of depthwise-separable temporal convolutions.
//!
//! Parameter names (row-vector convention, `x W + b`):
//!
//! | name | shape |
//! |------|-------|
//! | `input.weight` | D x d |
//! | `input.bias` | 1 x d |
//! | `input.norm.gain`, `input.norm.bias` | 1 x d |
//! | `position` | max_len x d |
//! | `layers.{l}.attn_norm.gain`, `layers.{l}.attn_norm.bias` | 1 x d |
//! | `layers.{l}.attn.query`, `.key`, `.value` | d x d (head `h` owns columns `h*d_h..(h+1)*d_h`) |
//! | `layers.{l}.attn.output` | d x d |
//! | `layers.{l}.ffn_norm.gain`, `layers.{l}.ffn_norm.bias` | 1 x d |
//! | `layers.{l}.ffn.w1` / `.b1` | d x (ffn_mult d) / 1 x (ffn_mult d) |
//! | `layers.{l}.ffn.w2` / `.b2` | (ffn_mult d) x d / 1 x d |
//! | `fusion.gate.weight` / `.bias` | 2d x d / 1 x d |
//! | `fusion.norm.gain`, `fusion.norm.bias` | 1 x d |
//! | `refine.{b}.depthwise` | d x kernel |
//! | `refine.{b}.pointwise.weight` / `.bias` | d x d / 1 x d |

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamStore};
use crate::timeline::SegmentIndexMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub refine_blocks: usize,
    pub kernel: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            model_dim: 128,
            heads: 4,
            layers: 2,
            refine_blocks: 2,
            kernel: 5,
            max_len: 1024,
            ffn_mult: 4,
        }
    }
}

impl ScorerConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("kernel", self.kernel),
            ("max_len", self.max_len),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("scorer.{name} must be at least 1")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "scorer.model_dim {} is not divisible by scorer.heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("scorer.kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Adds freshly initialized scorer tensors to `store`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        let d = self.model_dim;
        let hidden = self.ffn_mult * d;
        let zeros = |r, c| Array2::<f64>::zeros((r, c));
        let ones = |c| Array2::<f64>::ones((1, c));

        store.insert("input.weight", fan_in_uniform(rng, (self.input_dim, d), self.input_dim));
        store.insert("input.bias", zeros(1, d));
        store.insert("input.norm.gain", ones(d));
        store.insert("input.norm.bias", zeros(1, d));
        store.insert("position", zeros(self.max_len, d));
        for l in 0..self.layers {
            store.insert(format!("layers.{l}.attn_norm.gain"), ones(d));
            store.insert(format!("layers.{l}.attn_norm.bias"), zeros(1, d));
            for proj in ["query", "key", "value", "output"] {
                store.insert(format!("layers.{l}.attn.{proj}"), fan_in_uniform(rng, (d, d), d));
            }
            store.insert(format!("layers.{l}.ffn_norm.gain"), ones(d));
            store.insert(format!("layers.{l}.ffn_norm.bias"), zeros(1, d));
            store.insert(format!("layers.{l}.ffn.w1"), fan_in_uniform(rng, (d, hidden), d));
            store.insert(format!("layers.{l}.ffn.b1"), zeros(1, hidden));
            store.insert(format!("layers.{l}.ffn.w2"), fan_in_uniform(rng, (hidden, d), hidden));
            store.insert(format!("layers.{l}.ffn.b2"), zeros(1, d));
        }
        store.insert("fusion.gate.weight", fan_in_uniform(rng, (2 * d, d), 2 * d));
        store.insert("fusion.gate.bias", zeros(1, d));
        store.insert("fusion.norm.gain", ones(d));
        store.insert("fusion.norm.bias", zeros(1, d));
        for b in 0..self.refine_blocks {
            store.insert(
                format!("refine.{b}.depthwise"),
                fan_in_uniform(rng, (d, self.kernel), self.kernel),
            );
            store.insert(format!("refine.{b}.pointwise.weight"), fan_in_uniform(rng, (d, d), d));
            store.insert(format!("refine.{b}.pointwise.bias"), zeros(1, d));
        }
    }
}

/// `LN(x) * gain + bias` with the affine pair stored under `prefix`.
pub(crate) fn affine_norm(tape: &mut Tape, p: &BoundParams<'_>, prefix: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let scaled = tape.mul(n, p.get(&format!("{prefix}.gain")))?;
    tape.add(scaled, p.get(&format!("{prefix}.bias")))
}

/// `h_t = LN(x_t W_in + b_in) + phi_t` for the `T x D` features `x`.
pub fn project_and_embed(tape: &mut Tape, p: &BoundParams<'_>, cfg: &ScorerConfig, x: Var) -> Result<Var> {
    let (t_len, dim) = tape.value(x).dim();
    if t_len > cfg.max_len {
        return Err(Error::Capacity {
            len: t_len,
            max: cfg.max_len,
        });
    }
    if dim != cfg.input_dim {
        return Err(Error::shape(
            "project_and_embed",
            format!("features have {dim} columns, scorer expects {}", cfg.input_dim),
        ));
    }
    let proj = tape.matmul(x, p.get("input.weight"))?;
    let proj = tape.add(proj, p.get("input.bias"))?;
    let normed = affine_norm(tape, p, "input.norm", proj)?;
    let rows: Vec<usize> = (0..t_len).collect();
    let pos = tape.gather_rows(p.get("position"), &rows)?;
    tape.add(normed, pos)
}

/// One token per segment: the mean of its frame tokens (zero row if empty).
pub fn segment_tokenize(tape: &mut Tape, h0: Var, seg: &SegmentIndexMap) -> Result<Var> {
    tape.segment_mean(h0, &seg.index_sets)
}

fn multi_head_attention(tape: &mut Tape, p: &BoundParams<'_>, cfg: &ScorerConfig, layer: usize, z: Var) -> Result<Var> {
    let dh = cfg.head_dim();
    let q = tape.matmul(z, p.get(&format!("layers.{layer}.attn.query")))?;
    let k = tape.matmul(z, p.get(&format!("layers.{layer}.attn.key")))?;
    let v = tape.matmul(z, p.get(&format!("layers.{layer}.attn.value")))?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut heads: Option<Var> = None;
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, inv_sqrt);
        let attn = tape.softmax_rows(logits);
        let out = tape.matmul(attn, vh)?;
        heads = Some(match heads {
            None => out,
            Some(acc) => tape.concat_cols(acc, out)?,
        });
    }
    let concat = heads.expect("at least one head");
    tape.matmul(concat, p.get(&format!("layers.{layer}.attn.output")))
}

fn feed_forward(tape: &mut Tape, p: &BoundParams<'_>, layer: usize, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.get(&format!("layers.{layer}.ffn.w1")))?;
    let h = tape.add(h, p.get(&format!("layers.{layer}.ffn.b1")))?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p.get(&format!("layers.{layer}.ffn.w2")))?;
    tape.add(out, p.get(&format!("layers.{layer}.ffn.b2")))
}

/// `L` pre-norm encoder layers over the `M x d` segment tokens.
pub fn segment_transformer(tape: &mut Tape, p: &BoundParams<'_>, cfg: &ScorerConfig, z0: Var) -> Result<Var> {
    let mut z = z0;
    for l in 0..cfg.layers {
        let n = affine_norm(tape, p, &format!("layers.{l}.attn_norm"), z)?;
        let attn = multi_head_attention(tape, p, cfg, l, n)?;
        let u = tape.add(z, attn)?;
        let n = affine_norm(tape, p, &format!("layers.{l}.ffn_norm"), u)?;
        let ff = feed_forward(tape, p, l, n)?;
        z = tape.add(u, ff)?;
    }
    Ok(z)
}

/// `alpha_t = sigmoid([h_t; c_{s_t}] W_g + b_g)`, `h~_t = LN(h_t + alpha_t * c_{s_t})`.
pub fn gated_fusion(tape: &mut Tape, p: &BoundParams<'_>, h0: Var, context: Var, seg: &SegmentIndexMap) -> Result<Var> {
    let g = tape.gather_rows(context, &seg.segment_ids)?;
    let both = tape.concat_cols(h0, g)?;
    let gate = tape.matmul(both, p.get("fusion.gate.weight"))?;
    let gate = tape.add(gate, p.get("fusion.gate.bias"))?;
    let alpha = tape.sigmoid(gate);
    let gated = tape.mul(alpha, g)?;
    let fused = tape.add(h0, gated)?;
    affine_norm(tape, p, "fusion.norm", fused)
}

/// `H^ = H~ + Psi(H~)`, where `Psi` chains `refine_blocks` blocks of
/// depthwise conv -> GELU -> pointwise mixing.
pub fn temporal_refine(tape: &mut Tape, p: &BoundParams<'_>, cfg: &ScorerConfig, h: Var) -> Result<Var> {
    if cfg.refine_blocks == 0 {
        return Ok(h);
    }
    let mut x = h;
    for b in 0..cfg.refine_blocks {
        let conv = tape.depthwise_conv1d(x, p.get(&format!("refine.{b}.depthwise")))?;
        let act = tape.gelu(conv);
        x = tape.pointwise_conv1d(
            act,
            p.get(&format!("refine.{b}.pointwise.weight")),
            p.get(&format!("refine.{b}.pointwise.bias")),
        )?;
    }
    tape.add(h, x)
}

/// Intermediate tape nodes of one scorer pass.
#[derive(Debug, Clone, Copy)]
pub struct ScorerVars {
    pub embedded: Var,
    pub segment_tokens: Var,
    pub context: Var,
    pub fused: Var,
    pub refined: Var,
}

/// Full scorer: `T x D` features to refined `T x d` frame tokens.
pub fn score_frames(
    tape: &mut Tape,
    p: &BoundParams<'_>,
    cfg: &ScorerConfig,
    x: Var,
    seg: &SegmentIndexMap,
) -> Result<ScorerVars> {
    if seg.n_steps() != tape.value(x).nrows() {
        return Err(Error::shape(
            "score_frames",
            format!(
                "{} feature rows for {} segment ids",
                tape.value(x).nrows(),
                seg.n_steps()
            ),
        ));
    }
    let embedded = project_and_embed(tape, p, cfg, x)?;
    let segment_tokens = segment_tokenize(tape, embedded, seg)?;
    let context = segment_transformer(tape, p, cfg, segment_tokens)?;
    let fused = gated_fusion(tape, p, embedded, context, seg)?;
    let refined = temporal_refine(tape, p, cfg, fused)?;
    Ok(ScorerVars {
        embedded,
        segment_tokens,
        context,
        fused,
        refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(d: usize, heads: usize) -> ScorerConfig {
        ScorerConfig {
            input_dim: 3,
            model_dim: d,
            heads,
            layers: 1,
            refine_blocks: 1,
            kernel: 3,
            max_len: 8,
            ffn_mult: 2,
        }
    }

    fn params(cfg: &ScorerConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        cfg.init_params(&mut ChaCha8Rng::seed_from_u64(seed), &mut store);
        store
    }

    fn seg_map(ids: &[usize], m: usize) -> SegmentIndexMap {
        let mut index_sets = vec![Vec::new(); m];
        for (t, &k) in ids.iter().enumerate() {
            index_sets[k].push(t);
        }
        SegmentIndexMap {
            sampled_counts: index_sets.iter().map(Vec::len).collect(),
            segment_ids: ids.to_vec(),
            index_sets,
            lengths: vec![1; m],
        }
    }

    fn zero(store: &mut ParamStore, prefix: &str) {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(str::to_owned)
            .collect();
        for n in names {
            store.get_mut(&n).unwrap().fill(0.0);
        }
    }

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(ScorerConfig::default().validate().is_ok());
        assert!(ScorerConfig {
            heads: 3,
            ..ScorerConfig::default()
        }
        .validate()
        .is_err());
        assert!(ScorerConfig {
            kernel: 4,
            ..ScorerConfig::default()
        }
        .validate()
        .is_err());
        assert!(ScorerConfig {
            model_dim: 0,
            ..ScorerConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_features_embed_to_zero() {
        let cfg = tiny(4, 2);
        let store = params(&cfg, 1);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let x = tape.constant(Array2::zeros((5, 3)));
        let h = project_and_embed(&mut tape, &p, &cfg, x).unwrap();
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_layer_norm_embedding() {
        let cfg = ScorerConfig {
            input_dim: 2,
            model_dim: 2,
            heads: 1,
            ..tiny(2, 1)
        };
        let mut store = params(&cfg, 1);
        *store.get_mut("input.weight").unwrap() = Array2::eye(2);
        store.get_mut("position").unwrap().row_mut(0).assign(&array![0.1, 0.2]);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let x = tape.constant(array![[1.0, -1.0]]);
        let h = project_and_embed(&mut tape, &p, &cfg, x).unwrap();
        let v = tape.value(h);
        assert_abs_diff_eq!(v[[0, 0]], 1.1, epsilon = 1e-5);
        assert_abs_diff_eq!(v[[0, 1]], -0.8, epsilon = 1e-5);
    }

    #[test]
    fn positional_capacity_boundary() {
        let cfg = tiny(4, 2);
        let store = params(&cfg, 1);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let ok = tape.constant(Array2::ones((cfg.max_len, 3)));
        assert!(project_and_embed(&mut tape, &p, &cfg, ok).is_ok());
        let too_long = tape.constant(Array2::ones((cfg.max_len + 1, 3)));
        assert!(matches!(
            project_and_embed(&mut tape, &p, &cfg, too_long),
            Err(Error::Capacity { len: 9, max: 8 })
        ));
    }

    #[test]
    fn tokenization_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(array![[1.0, 1.0], [3.0, 3.0]]);
        let z = segment_tokenize(&mut tape, h, &seg_map(&[0, 0], 1)).unwrap();
        assert_eq!(tape.value(z), &array![[2.0, 2.0]]);
        let z = segment_tokenize(&mut tape, h, &seg_map(&[0, 1], 2)).unwrap();
        assert_eq!(tape.value(z), tape.value(h));
    }

    #[test]
    fn zero_branches_are_identity() {
        let cfg = tiny(4, 2);
        let mut store = params(&cfg, 2);
        zero(&mut store, "layers.0.attn.");
        zero(&mut store, "layers.0.ffn.");
        zero(&mut store, "refine.");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let z0 = tape.constant(random(&mut rng, (3, 4)));
        let c = segment_transformer(&mut tape, &p, &cfg, z0).unwrap();
        assert_eq!(tape.value(c), tape.value(z0));
        let h = tape.constant(random(&mut rng, (5, 4)));
        let r = temporal_refine(&mut tape, &p, &cfg, h).unwrap();
        assert_eq!(tape.value(r), tape.value(h));
    }

    #[test]
    fn single_token_attention_is_linear() {
        let cfg = tiny(4, 2);
        let store = params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random(&mut rng, (1, 4));
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let zv = tape.constant(z.clone());
        let out = multi_head_attention(&mut tape, &p, &cfg, 0, zv).unwrap();
        let expected = z
            .dot(store.get("layers.0.attn.value").unwrap())
            .dot(store.get("layers.0.attn.output").unwrap());
        for (a, b) in tape.value(out).iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Step-by-step evaluation of one layer with M = 2, H = 1, d = 2.
    #[test]
    fn hand_evaluated_encoder_layer() {
        let cfg = ScorerConfig {
            model_dim: 2,
            heads: 1,
            ffn_mult: 1,
            ..tiny(2, 1)
        };
        let mut store = params(&cfg, 4);
        let wq = array![[1.0, 0.5], [0.0, 1.0]];
        let wk = array![[0.5, 0.0], [1.0, 1.0]];
        let wv = array![[1.0, -1.0], [2.0, 0.0]];
        let wo = array![[0.5, 0.0], [0.0, 2.0]];
        let w1 = array![[1.0, 0.0], [0.0, -1.0]];
        let w2 = array![[0.3, 0.1], [0.2, 0.4]];
        for (name, value) in [
            ("layers.0.attn.query", &wq),
            ("layers.0.attn.key", &wk),
            ("layers.0.attn.value", &wv),
            ("layers.0.attn.output", &wo),
            ("layers.0.ffn.w1", &w1),
            ("layers.0.ffn.w2", &w2),
        ] {
            *store.get_mut(name).unwrap() = value.clone();
        }
        let z0 = array![[1.0, 3.0], [2.0, -1.0]];

        // Independent evaluation. With d = 2 every layer norm maps a row
        // (a, b) to +-(1, -1) * |a - b| / 2 / sqrt((a - b)^2 / 4 + eps).
        let ln = |r: [f64; 2]| {
            let half = (r[0] - r[1]) / 2.0;
            let s = half / (half * half + 1e-5).sqrt();
            [s, -s]
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let mm =
            |a: [f64; 2], w: &Array2<f64>| [a[0] * w[[0, 0]] + a[1] * w[[1, 0]], a[0] * w[[0, 1]] + a[1] * w[[1, 1]]];
        let rows = [[1.0, 3.0], [2.0, -1.0]];
        let n: Vec<[f64; 2]> = rows.iter().map(|&r| ln(r)).collect();
        let q: Vec<_> = n.iter().map(|&r| mm(r, &wq)).collect();
        let k: Vec<_> = n.iter().map(|&r| mm(r, &wk)).collect();
        let v: Vec<_> = n.iter().map(|&r| mm(r, &wv)).collect();
        let mut expected = Vec::new();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let e: Vec<f64> = s.iter().map(|x| x.exp()).collect();
            let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let att = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
            let o = mm(att, &wo);
            let u = [rows[i][0] + o[0], rows[i][1] + o[1]];
            let h = mm(ln(u), &w1);
            let f = mm([gelu(h[0]), gelu(h[1])], &w2);
            expected.push([u[0] + f[0], u[1] + f[1]]);
        }

        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let z = tape.constant(z0);
        let c = segment_transformer(&mut tape, &p, &cfg, z).unwrap();
        let got = tape.value(c);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(got[[i, j]], expected[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gate_cases() {
        let cfg = tiny(4, 2);
        let mut store = params(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h0v = random(&mut rng, (3, 4));
        let cv = random(&mut rng, (2, 4));
        let seg = seg_map(&[0, 1, 1], 2);

        let ln_of = |x: Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let n = tape.layer_norm(v);
            tape.value(n).clone()
        };

        // W_g = 0, b_g = 0: alpha = 0.5
        store.get_mut("fusion.gate.weight").unwrap().fill(0.0);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let (h0, c) = (tape.constant(h0v.clone()), tape.constant(cv.clone()));
        let out = gated_fusion(&mut tape, &p, h0, c, &seg).unwrap();
        let g = cv.select(ndarray::Axis(0), &seg.segment_ids);
        let expected = ln_of(&h0v + &(&g * 0.5));
        for (a, b) in tape.value(out).iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // saturated gate
        store.get_mut("fusion.gate.bias").unwrap().fill(-30.0);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let (h0, c) = (tape.constant(h0v.clone()), tape.constant(cv.clone()));
        let out = gated_fusion(&mut tape, &p, h0, c, &seg).unwrap();
        let expected = ln_of(h0v.clone());
        for (a, b) in tape.value(out).iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }

        // zero context
        let mut store = params(&cfg, 7);
        store.get_mut("fusion.gate.bias").unwrap().fill(0.3);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let (h0, c) = (tape.constant(h0v.clone()), tape.constant(Array2::zeros((2, 4))));
        let out = gated_fusion(&mut tape, &p, h0, c, &seg).unwrap();
        assert_eq!(tape.value(out), &ln_of(h0v));
    }

    #[test]
    fn hand_evaluated_refinement() {
        let cfg = ScorerConfig {
            model_dim: 1,
            heads: 1,
            ..tiny(1, 1)
        };
        let mut store = params(&cfg, 1);
        *store.get_mut("refine.0.depthwise").unwrap() = array![[0.0, 1.0, 0.0]];
        *store.get_mut("refine.0.pointwise.weight").unwrap() = array![[1.0]];
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let h = tape.constant(array![[2.0], [2.0], [2.0]]);
        let r = temporal_refine(&mut tape, &p, &cfg, h).unwrap();
        for &v in tape.value(r).iter() {
            assert_abs_diff_eq!(v, 3.9545, epsilon = 1e-4);
        }

        // T = 1 sees [0, x, 0] through the padding
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let h = tape.constant(array![[2.0]]);
        let r = temporal_refine(&mut tape, &p, &cfg, h).unwrap();
        assert!(tape.value(r)[[0, 0]].is_finite());
    }

    #[test]
    fn segment_permutation_permutes_context() {
        let cfg = tiny(4, 2);
        let store = params(&cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h0v = random(&mut rng, (6, 4));
        let ids = [0, 0, 1, 2, 2, 2];
        let perm = [2, 0, 1]; // old segment k -> new label perm[k]
        let relabeled: Vec<usize> = ids.iter().map(|&k| perm[k]).collect();

        let run = |ids: &[usize]| {
            let seg = seg_map(ids, 3);
            let mut tape = Tape::new();
            let p = tape.bind(&store);
            let h0 = tape.constant(h0v.clone());
            let z = segment_tokenize(&mut tape, h0, &seg).unwrap();
            let c = segment_transformer(&mut tape, &p, &cfg, z).unwrap();
            let f = gated_fusion(&mut tape, &p, h0, c, &seg).unwrap();
            (tape.value(c).clone(), tape.value(f).clone())
        };
        let (c1, f1) = run(&ids);
        let (c2, f2) = run(&relabeled);
        for k in 0..3 {
            for j in 0..4 {
                assert_abs_diff_eq!(c1[[k, j]], c2[[perm[k], j]], epsilon = 1e-12);
            }
        }
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn without_refinement_each_frame_sees_only_its_token_and_context_row() {
        let cfg = tiny(4, 2);
        let mut store = params(&cfg, 13);
        zero(&mut store, "refine.");
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, (5, 3));
        let seg = seg_map(&[0, 0, 1, 1, 1], 2);
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let xv = tape.constant(x);
        let vars = score_frames(&mut tape, &p, &cfg, xv, &seg).unwrap();
        let (h0, c, out) = (
            tape.value(vars.embedded).clone(),
            tape.value(vars.context).clone(),
            tape.value(vars.refined).clone(),
        );
        for t in 0..5 {
            let mut local = Tape::new();
            let lp = local.bind(&store);
            let h = local.constant(h0.row(t).to_owned().insert_axis(ndarray::Axis(0)));
            let ctx = local.constant(c.row(seg.segment_ids[t]).to_owned().insert_axis(ndarray::Axis(0)));
            let one = seg_map(&[0], 1);
            let f = gated_fusion(&mut local, &lp, h, ctx, &one).unwrap();
            for (a, b) in local.value(f).iter().zip(out.row(t).iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scorer_gradients_match_finite_differences() {
        let cfg = tiny(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = params(&cfg, 16);
        // exercise the positional table with non-zero values
        *store.get_mut("position").unwrap() = random(&mut rng, (8, 4)) * 0.1;
        let x = random(&mut rng, (5, 3));
        let w = random(&mut rng, (5, 4));
        let seg = seg_map(&[0, 0, 1, 2, 2], 3);
        let report = finite_difference_check(&store, 1e-4, |tape, p| {
            let xv = tape.constant(x.clone());
            let vars = score_frames(tape, p, &cfg, xv, &seg)?;
            let wv = tape.constant(w.clone());
            let y = tape.mul(vars.refined, wv)?;
            let y = tape.sum(y);
            Ok(tape.square(y))
        })
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "{:?} analytic {} numeric {}",
            report.worst,
            report.analytic,
            report.numeric
        );
    }
}
