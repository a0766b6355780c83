//! TimeAttention: masked multi-head self-attention over flattened 2D tokens,
//! with rotary embedding on the time axis and two learnable per-head
//! scalars that separate same-variable from cross-variable pairs.

use crate::autodiff::{rope_angle, Tape, Var};
use crate::error::{Error, Result};
use crate::masking::FlatTokenMask;
use crate::tensor::{Scalar, Tensor};

/// Rotary frequency base.
pub const DEFAULT_THETA_BASE: f64 = 10000.0;

/// Weights of one attention layer. `T` is a [`Tensor`] for storage and a
/// [`Var`] once bound to a tape.
///
/// `w_q`, `w_k`, `w_v` are `D × D`; columns `h·d_k .. (h+1)·d_k` are head
/// `h`'s `D × d_k` projection. `u`, `v` have one entry per head and are
/// absent when the variable scalars are disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub u: Option<T>,
    pub v: Option<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSettings {
    pub heads: usize,
    pub theta_base: f64,
    pub use_rope: bool,
}

/// A flat mask with its additive form and same-variable pattern computed
/// once and reused by every layer of a forward pass.
#[derive(Clone, Debug)]
pub struct PreparedMask<F> {
    pub mask: FlatTokenMask,
    additive: Tensor<F>,
    same_variable: Vec<bool>,
    time_of: Vec<usize>,
}

impl<F: Scalar> PreparedMask<F> {
    pub fn new(mask: FlatTokenMask) -> Self {
        let t = mask.t();
        PreparedMask {
            additive: mask.additive(),
            same_variable: mask.same_variable_pattern(),
            time_of: (0..mask.size()).map(|k| k % t).collect(),
            mask,
        }
    }

    pub fn size(&self) -> usize {
        self.mask.size()
    }
}

/// Rotates consecutive pairs `(2r, 2r+1)` of `vec` by `position · base^(−2r/d)`.
pub fn rope_rotate(vec: &[f64], position: usize, theta_base: f64) -> Result<Vec<f64>> {
    let d = vec.len();
    if !d.is_multiple_of(2) {
        return Err(Error::contract(format!("rope needs an even dimension, got {d}")));
    }
    let mut out = vec![0.0; d];
    for r in 0..d / 2 {
        let (s, c) = rope_angle(position, r, d, theta_base).sin_cos();
        out[2 * r] = vec[2 * r] * c - vec[2 * r + 1] * s;
        out[2 * r + 1] = vec[2 * r] * s + vec[2 * r + 1] * c;
    }
    Ok(out)
}

/// `[NT, D] · [D, D]` reshaped into per-head blocks `[H, NT, d_k]`.
fn project_heads<F: Scalar>(tape: &mut Tape<F>, h: Var, w: Var, heads: usize) -> Result<Var> {
    let y = tape.matmul(h, w)?;
    let (rows, d) = (tape.shape(y)[0], tape.shape(y)[1]);
    let y = tape.reshape(y, &[rows, heads, d / heads])?;
    tape.permute(y, &[1, 0, 2])
}

fn check_input<F: Scalar>(tape: &Tape<F>, h: Var, mask: &PreparedMask<F>, p: &AttentionParams<Var>, s: &AttentionSettings) -> Result<usize> {
    let shape = tape.shape(h);
    if shape.len() != 2 || shape[0] != mask.size() {
        return Err(Error::dim("time_attention input", shape, &[mask.size()]));
    }
    let d = shape[1];
    if s.heads == 0 || !d.is_multiple_of(s.heads) {
        return Err(Error::config(format!("model dimension {d} is not divisible by {} heads", s.heads)));
    }
    for w in [p.w_q, p.w_k, p.w_v, p.w_o] {
        if tape.shape(w) != [d, d] {
            return Err(Error::dim("attention weight", tape.shape(w), &[d, d]));
        }
    }
    Ok(d / s.heads)
}

/// Unmasked, unscaled scores `A[h, a, b]` for destination token `a` and
/// source token `b`: the rotary bilinear form plus `u` on same-variable pairs
/// and `v` on cross-variable pairs.
pub fn attention_scores<F: Scalar>(
    tape: &mut Tape<F>,
    h: Var,
    mask: &PreparedMask<F>,
    params: &AttentionParams<Var>,
    settings: &AttentionSettings,
) -> Result<Var> {
    check_input(tape, h, mask, params, settings)?;
    let mut q = project_heads(tape, h, params.w_q, settings.heads)?;
    let mut k = project_heads(tape, h, params.w_k, settings.heads)?;
    if settings.use_rope {
        q = tape.rope(q, &mask.time_of, settings.theta_base)?;
        k = tape.rope(k, &mask.time_of, settings.theta_base)?;
    }
    let kt = tape.transpose(k)?;
    let mut scores = tape.matmul(q, kt)?;
    if let (Some(u), Some(v)) = (params.u, params.v) {
        let bias = tape.var_bias(u, v, &mask.same_variable)?;
        scores = tape.add(scores, bias)?;
    }
    Ok(scores)
}

/// Output of [`time_attention`]: the `[NT, D]` result and the post-softmax
/// attention maps `[H, NT, NT]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub probs: Var,
}

/// `Softmax((Mask + A) / √d_k) · V`, per head, heads concatenated and
/// mapped through `W_o`.
pub fn time_attention<F: Scalar>(
    tape: &mut Tape<F>,
    h: Var,
    mask: &PreparedMask<F>,
    params: &AttentionParams<Var>,
    settings: &AttentionSettings,
) -> Result<AttentionOutput> {
    let dk = check_input(tape, h, mask, params, settings)?;
    let scores = attention_scores(tape, h, mask, params, settings)?;
    let masked = tape.add_const(scores, &mask.additive)?;
    let scaled = tape.scale(masked, F::from_f64(1.0 / (dk as f64).sqrt()));
    let probs = tape.softmax(scaled)?;
    let v = project_heads(tape, h, params.w_v, settings.heads)?;
    let o = tape.matmul(probs, v)?;
    let o = tape.permute(o, &[1, 0, 2])?;
    let o = tape.reshape(o, &[mask.size(), dk * settings.heads])?;
    let output = tape.matmul(o, params.w_o)?;
    Ok(AttentionOutput { output, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_temporal_mask, kronecker_mask, VariableDependencyGraph};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Mat = Vec<Vec<f64>>;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn to_tensor(m: &Mat) -> Tensor<f64> {
        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        Tensor::new(&[m.len(), m[0].len()], flat).unwrap()
    }

    /// Explicit block-diagonal `R_{θ,t}` of size `d × d`, oriented so that
    /// `qᵀ R_{θ,i−j} k` is the relative form of rotating `q` by `i` and `k`
    /// by `j`.
    fn rotation_matrix(t: f64, d: usize, base: f64) -> Mat {
        let mut r = vec![vec![0.0; d]; d];
        for k in 0..d / 2 {
            let angle = t * base.powf(-2.0 * k as f64 / d as f64);
            r[2 * k][2 * k] = angle.cos();
            r[2 * k][2 * k + 1] = angle.sin();
            r[2 * k + 1][2 * k] = -angle.sin();
            r[2 * k + 1][2 * k + 1] = angle.cos();
        }
        r
    }

    fn mat_vec(m: &Mat, x: &[f64]) -> Vec<f64> {
        m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Row `x` times head block of `w` (columns `head·dk..`).
    fn head_proj(x: &[f64], w: &Mat, head: usize, dk: usize) -> Vec<f64> {
        (0..dk)
            .map(|c| x.iter().zip(w).map(|(xi, row)| xi * row[head * dk + c]).sum())
            .collect()
    }

    struct Case {
        n: usize,
        t: usize,
        d: usize,
        heads: usize,
        h: Mat,
        wq: Mat,
        wk: Mat,
        wv: Mat,
        wo: Mat,
        u: Vec<f64>,
        v: Vec<f64>,
    }

    fn random_case(seed: u64, n: usize, t: usize, d: usize, heads: usize) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Case {
            n,
            t,
            d,
            heads,
            h: rand_mat(&mut rng, n * t, d),
            wq: rand_mat(&mut rng, d, d),
            wk: rand_mat(&mut rng, d, d),
            wv: rand_mat(&mut rng, d, d),
            wo: rand_mat(&mut rng, d, d),
            u: (0..heads).map(|_| rng.random_range(-1.0..1.0)).collect(),
            v: (0..heads).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Per-pair score `h_aᵀ W_q R_{i−j} W_kᵀ h_b + u·1(m=n) + v·1(m≠n)`.
    fn oracle_score(c: &Case, head: usize, a: usize, b: usize) -> f64 {
        let dk = c.d / c.heads;
        let q = head_proj(&c.h[a], &c.wq, head, dk);
        let k = head_proj(&c.h[b], &c.wk, head, dk);
        let (ti, tj) = ((a % c.t) as f64, (b % c.t) as f64);
        let r = rotation_matrix(ti - tj, dk, DEFAULT_THETA_BASE);
        let bilinear = dot(&q, &mat_vec(&r, &k));
        bilinear + if a / c.t == b / c.t { c.u[head] } else { c.v[head] }
    }

    /// Naive loop over destination tokens, straight from the formula.
    fn oracle_attention(c: &Case, mask: &FlatTokenMask) -> Mat {
        let dk = c.d / c.heads;
        let nt = c.n * c.t;
        let mut concat = vec![vec![0.0; c.d]; nt];
        for head in 0..c.heads {
            for a in 0..nt {
                let logits: Vec<f64> = (0..nt)
                    .map(|b| {
                        let m = if mask.entry(a, b) == 1 { 0.0 } else { f64::NEG_INFINITY };
                        (m + oracle_score(c, head, a, b)) / (dk as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for b in 0..nt {
                    let vb = head_proj(&c.h[b], &c.wv, head, dk);
                    for k in 0..dk {
                        concat[a][head * dk + k] += w[b] / z * vb[k];
                    }
                }
            }
        }
        concat
            .iter()
            .map(|row| (0..c.d).map(|j| (0..c.d).map(|k| row[k] * c.wo[k][j]).sum()).collect())
            .collect()
    }

    fn bind(tape: &mut Tape<f64>, c: &Case) -> (Var, AttentionParams<Var>) {
        let h = tape.constant(to_tensor(&c.h));
        let p = AttentionParams {
            w_q: tape.param(to_tensor(&c.wq)),
            w_k: tape.param(to_tensor(&c.wk)),
            w_v: tape.param(to_tensor(&c.wv)),
            w_o: tape.param(to_tensor(&c.wo)),
            u: Some(tape.param(Tensor::new(&[c.heads], c.u.clone()).unwrap())),
            v: Some(tape.param(Tensor::new(&[c.heads], c.v.clone()).unwrap())),
        };
        (h, p)
    }

    fn settings(heads: usize) -> AttentionSettings {
        AttentionSettings {
            heads,
            theta_base: DEFAULT_THETA_BASE,
            use_rope: true,
        }
    }

    fn full_mask(n: usize, t: usize, causal: bool) -> FlatTokenMask {
        kronecker_mask(
            &VariableDependencyGraph::full(n).unwrap(),
            &build_temporal_mask(t, causal).unwrap(),
        )
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let v = vec![0.3, -1.2, 2.0, 0.7];
        assert_eq!(rope_rotate(&v, 0, DEFAULT_THETA_BASE).unwrap(), v);
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, DEFAULT_THETA_BASE).is_err());
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = rng.random_range(0..500);
            let r = rope_rotate(&v, p, DEFAULT_THETA_BASE).unwrap();
            assert!((dot(&v, &v).sqrt() - dot(&r, &r).sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn rope_inner_product_is_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (i, j) = (rng.random_range(0..50), rng.random_range(0..50));
            let lhs = dot(
                &rope_rotate(&q, i, DEFAULT_THETA_BASE).unwrap(),
                &rope_rotate(&k, j, DEFAULT_THETA_BASE).unwrap(),
            );
            let r = rotation_matrix(i as f64 - j as f64, 8, DEFAULT_THETA_BASE);
            let rhs = dot(&q, &mat_vec(&r, &k));
            assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn scores_reduce_to_scalars_when_projections_vanish() {
        let (n, t, d) = (2, 3, 4);
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = tape.constant(to_tensor(&rand_mat(&mut rng, n * t, d)));
        let zero = Tensor::zeros(&[d, d]);
        let p = AttentionParams {
            w_q: tape.param(zero.clone()),
            w_k: tape.param(zero.clone()),
            w_v: tape.param(zero.clone()),
            w_o: tape.param(zero),
            u: Some(tape.param(Tensor::from_f64(&[1], &[0.3]).unwrap())),
            v: Some(tape.param(Tensor::from_f64(&[1], &[-0.1]).unwrap())),
        };
        let mask = PreparedMask::new(full_mask(n, t, true));
        let s = attention_scores(&mut tape, h, &mask, &p, &settings(1)).unwrap();
        let scores = tape.value(s);
        for a in 0..n * t {
            for b in 0..n * t {
                let expected = if a / t == b / t { 0.3 } else { -0.1 };
                assert_eq!(scores.at(&[0, a, b]), expected);
            }
        }
    }

    #[test]
    fn diagonal_score_has_no_rotation() {
        let c = random_case(8, 2, 3, 8, 2);
        let mut tape = Tape::new();
        let (h, p) = bind(&mut tape, &c);
        let mask = PreparedMask::new(full_mask(2, 3, true));
        let s = attention_scores(&mut tape, h, &mask, &p, &settings(2)).unwrap();
        for head in 0..2 {
            for a in 0..6 {
                let q = head_proj(&c.h[a], &c.wq, head, 4);
                let k = head_proj(&c.h[a], &c.wk, head, 4);
                let expected = dot(&q, &k) + c.u[head];
                assert!((tape.value(s).at(&[head, a, a]) - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scores_match_per_pair_oracle() {
        let c = random_case(9, 2, 3, 8, 2);
        let mut tape = Tape::new();
        let (h, p) = bind(&mut tape, &c);
        let mask = PreparedMask::new(full_mask(2, 3, true));
        let s = attention_scores(&mut tape, h, &mask, &p, &settings(2)).unwrap();
        for head in 0..2 {
            for a in 0..6 {
                for b in 0..6 {
                    let got = tape.value(s).at(&[head, a, b]);
                    let want = oracle_score(&c, head, a, b);
                    assert!((got - want).abs() <= 1e-8, "({head},{a},{b}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn time_attention_matches_naive_loop() {
        for (seed, causal) in [(10, true), (11, false)] {
            let c = random_case(seed, 2, 3, 8, 2);
            let flat = kronecker_mask(
                &VariableDependencyGraph::covariate(1).unwrap(),
                &build_temporal_mask(3, causal).unwrap(),
            );
            let mut tape = Tape::new();
            let (h, p) = bind(&mut tape, &c);
            let out = time_attention(&mut tape, h, &PreparedMask::new(flat.clone()), &p, &settings(2)).unwrap();
            let want = oracle_attention(&c, &flat);
            for a in 0..6 {
                for j in 0..8 {
                    let got = tape.value(out.output).at(&[a, j]);
                    assert!((got - want[a][j]).abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn single_token_output_is_projected_value() {
        let c = random_case(12, 1, 1, 4, 1);
        let mut tape = Tape::new();
        let (h, p) = bind(&mut tape, &c);
        let out = time_attention(&mut tape, h, &PreparedMask::new(full_mask(1, 1, true)), &p, &settings(1)).unwrap();
        let v = head_proj(&c.h[0], &c.wv, 0, 4);
        for j in 0..4 {
            let want: f64 = (0..4).map(|k| v[k] * c.wo[k][j]).sum();
            assert!((tape.value(out.output).at(&[0, j]) - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_scores_average_values_uniformly() {
        let (n, t, d) = (2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let hm = rand_mat(&mut rng, n * t, d);
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(to_tensor(&hm));
        let eye = Tensor::from_fn(&[d, d], |k| if k / d == k % d { 1.0 } else { 0.0 });
        let p = AttentionParams {
            w_q: tape.param(Tensor::zeros(&[d, d])),
            w_k: tape.param(Tensor::zeros(&[d, d])),
            w_v: tape.param(eye.clone()),
            w_o: tape.param(eye),
            u: None,
            v: None,
        };
        let s = AttentionSettings { use_rope: false, ..settings(1) };
        let out = time_attention(&mut tape, h, &PreparedMask::new(full_mask(n, t, false)), &p, &s).unwrap();
        for a in 0..n * t {
            for j in 0..d {
                let mean = hm.iter().map(|r| r[j]).sum::<f64>() / (n * t) as f64;
                assert!((tape.value(out.output).at(&[a, j]) - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn future_sources_cannot_influence_output() {
        let c = random_case(14, 2, 4, 8, 2);
        let flat = full_mask(2, 4, true);
        let run = |h: &Mat| {
            let mut tape = Tape::new();
            let (_, p) = bind(&mut tape, &c);
            let hv = tape.constant(to_tensor(h));
            let out = time_attention(&mut tape, hv, &PreparedMask::new(flat.clone()), &p, &settings(2)).unwrap();
            tape.value(out.output).clone()
        };
        let base = run(&c.h);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut perturbed = c.h.clone();
        // perturb time 2 (0-based) of both variables
        for m in 0..2 {
            for x in perturbed[m * 4 + 2].iter_mut() {
                *x += rng.random_range(-5.0..5.0);
            }
        }
        let changed = run(&perturbed);
        for m in 0..2 {
            for i in 0..2 {
                let row = m * 4 + i;
                for j in 0..8 {
                    assert_eq!(base.at(&[row, j]), changed.at(&[row, j]));
                }
            }
        }
    }

    #[test]
    fn permuting_variables_permutes_output() {
        let c = random_case(16, 3, 2, 8, 2);
        let flat = full_mask(3, 2, true);
        let perm = [2usize, 0, 1];
        let permuted: Mat = (0..6).map(|k| c.h[perm[k / 2] * 2 + k % 2].clone()).collect();
        let run = |h: &Mat| {
            let mut tape = Tape::new();
            let (_, p) = bind(&mut tape, &c);
            let hv = tape.constant(to_tensor(h));
            let out = time_attention(&mut tape, hv, &PreparedMask::new(flat.clone()), &p, &settings(2)).unwrap();
            tape.value(out.output).clone()
        };
        let base = run(&c.h);
        let moved = run(&permuted);
        for k in 0..6 {
            let src = perm[k / 2] * 2 + k % 2;
            for j in 0..8 {
                assert!((moved.at(&[k, j]) - base.at(&[src, j])).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn scalars_are_scaled_with_the_bilinear_term() {
        // Single head, zero projections: the logits are (u or v)/√d_k, so the
        // weight on the other variable's token is exp(v/√dk) / (exp(u/√dk)+exp(v/√dk)).
        let (n, t, d) = (2, 1, 4);
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn(&[n * t, d], |k| k as f64));
        let p = AttentionParams {
            w_q: tape.param(Tensor::zeros(&[d, d])),
            w_k: tape.param(Tensor::zeros(&[d, d])),
            w_v: tape.param(Tensor::zeros(&[d, d])),
            w_o: tape.param(Tensor::zeros(&[d, d])),
            u: Some(tape.param(Tensor::from_f64(&[1], &[1.0]).unwrap())),
            v: Some(tape.param(Tensor::from_f64(&[1], &[-1.0]).unwrap())),
        };
        let out = time_attention(&mut tape, h, &PreparedMask::new(full_mask(n, t, true)), &p, &settings(1)).unwrap();
        let (a, b) = ((1.0f64 / 2.0).exp(), (-1.0f64 / 2.0).exp());
        let cross = tape.value(out.probs).at(&[0, 0, 1]);
        assert!((cross - b / (a + b)).abs() <= 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::zeros(&[5, 4]));
        let w = tape.param(Tensor::zeros(&[4, 4]));
        let p = AttentionParams { w_q: w, w_k: w, w_v: w, w_o: w, u: None, v: None };
        let mask = PreparedMask::new(full_mask(2, 3, true));
        assert!(matches!(
            time_attention(&mut tape, h, &mask, &p, &settings(1)),
            Err(Error::Dimension { .. })
        ));
        let h = tape.constant(Tensor::zeros(&[6, 4]));
        assert!(matches!(
            time_attention(&mut tape, h, &mask, &p, &settings(3)),
            Err(Error::Config(_))
        ));
    }
}
