use prior_attn_core::attention::{
    adaptive_soft_mask, causal_bias, combined_bias, gaussian_bias, multi_head_attention, ramp, raw_sigma_for,
    raw_span_for, AttentionKind, AttentionSettings, AttentionWeights, PriorParams, PriorVars,
};
use prior_attn_core::autodiff::{grad_check, Tape, Tensor, Var};
use prior_attn_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Random single-layer attention problem.
struct Setup {
    b: usize,
    t: usize,
    d: usize,
    h: usize,
    x: Vec<f64>,
    mats: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Setup {
    fn new(b: usize, t: usize, d: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, s: f64| (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        let x = draw(b * t * d, 1.0);
        let mats = (0..4).map(|_| draw(d * d, 0.5)).collect();
        let biases = (0..4).map(|_| draw(d, 0.1)).collect();
        Self {
            b,
            t,
            d,
            h,
            x,
            mats,
            biases,
        }
    }

    fn without_content(mut self) -> Self {
        for i in 0..2 {
            self.mats[i].iter_mut().for_each(|v| *v = 0.0);
            self.biases[i].iter_mut().for_each(|v| *v = 0.0);
        }
        self
    }

    fn weights(&self, tape: &mut Tape) -> Result<AttentionWeights> {
        let d = self.d;
        let mut m = Vec::new();
        for i in 0..4 {
            m.push(tape.constant(&[d, d], self.mats[i].clone())?);
            m.push(tape.constant(&[d], self.biases[i].clone())?);
        }
        Ok(AttentionWeights {
            wq: m[0],
            bq: m[1],
            wk: m[2],
            bk: m[3],
            wv: m[4],
            bv: m[5],
            wo: m[6],
            bo: m[7],
        })
    }

    fn settings(&self, kind: AttentionKind, ramp: f64) -> AttentionSettings {
        AttentionSettings {
            kind,
            heads: self.h,
            max_span: 20.0,
            ramp,
            dropout_p: 0.0,
        }
    }

    /// Runs attention with the given raw prior vars; returns (context, weights).
    fn run(&self, tape: &mut Tape, priors: PriorVars, settings: &AttentionSettings) -> Result<(Var, Var)> {
        let x = tape.constant(&[self.b, self.t, self.d], self.x.clone())?;
        let w = self.weights(tape)?;
        multi_head_attention(tape, x, &w, &priors, settings, None)
    }

    /// Attention weights `[B, h, T, T]` for per-head derived priors.
    fn attend(&self, kind: AttentionKind, ramp: f64, heads: &[PriorParams]) -> Vec<f64> {
        let mut tape = Tape::new();
        let priors = prior_constants(&mut tape, heads);
        let (_, w) = self.run(&mut tape, priors, &self.settings(kind, ramp)).unwrap();
        tape.value(w).to_vec()
    }
}

fn prior_constants(tape: &mut Tape, heads: &[PriorParams]) -> PriorVars {
    let h = heads.len();
    let mut col = |f: fn(&PriorParams) -> f64| tape.constant(&[h], heads.iter().map(f).collect()).unwrap();
    PriorVars {
        raw_span: Some(col(|p| p.raw_span)),
        mu: Some(col(|p| p.mu)),
        raw_sigma: Some(col(|p| p.raw_sigma)),
    }
}

fn derived(span: f64, mu: f64, sigma: f64) -> PriorParams {
    PriorParams::from_derived(span, mu, sigma).unwrap()
}

fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i * 37 % 17) as f64 / 17.0).collect();
    let w = tape.constant(&shape, w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn rows(w: &[f64], t: usize) -> impl Iterator<Item = (usize, &[f64])> {
    w.chunks(t).enumerate().map(move |(k, r)| (k % t, r))
}

#[test]
fn causal_bias_examples() {
    assert_eq!(causal_bias(1).unwrap().as_slice(), &[0.0]);
    assert_eq!(causal_bias(2).unwrap().as_slice(), &[0.0, NEG_INF, 0.0, 0.0]);
    assert_eq!(causal_bias(3).unwrap().get(0, 2), NEG_INF);
    assert!(matches!(causal_bias(0), Err(Error::Dimension { .. })));
}

#[test]
fn ramp_examples() {
    // a tiny ramp reproduces the hard window i - j <= L
    assert_eq!(ramp(2.0, 1e-9, 2.0), 1.0);
    assert_eq!(ramp(2.0, 1e-9, 3.0), 0.0);
    assert!((ramp(6.0, 3.0, 7.0) - 2.0 / 3.0).abs() < 1e-15);
    for l in [0.0, 0.5, 6.0, 20.0] {
        assert_eq!(ramp(l, 3.0, 0.0), 1.0);
    }
    let m = adaptive_soft_mask(6.0, 3.0, 10).unwrap();
    assert!((m.get(9, 2) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.get(2, 3), 0.0);
    assert!(matches!(adaptive_soft_mask(6.0, 0.0, 4), Err(Error::Contract(_))));
    assert!(matches!(adaptive_soft_mask(6.0, -1.0, 4), Err(Error::Contract(_))));
}

#[test]
fn gaussian_bias_examples() {
    let g = gaussian_bias(6.0, 1.0, 10).unwrap();
    assert_eq!(g.get(6, 0), 0.0);
    assert_eq!(g.get(7, 0), -0.5);
    assert_eq!(g.get(3, 3), -18.0);
    assert_eq!(g.get(3, 4), NEG_INF);
    assert!(matches!(gaussian_bias(6.0, 0.0, 4), Err(Error::Contract(_))));
}

#[test]
fn combined_bias_examples() {
    let g = gaussian_bias(6.0, 1.0, 10).unwrap();
    let neutral = adaptive_soft_mask(20.0, 3.0, 10).unwrap();
    let b = combined_bias(&g, &neutral).unwrap();
    for i in 0..10 {
        for j in 0..10 {
            assert_eq!(b.get(i, j), g.get(i, j));
        }
    }

    // flat Gaussian with a hard window of 2 is the causal window bias
    let flat = gaussian_bias(0.0, 1e300, 6).unwrap();
    let hard = adaptive_soft_mask(2.0, 1e-9, 6).unwrap();
    let b = combined_bias(&flat, &hard).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let want = if j <= i && i - j <= 2 { 0.0 } else { NEG_INF };
            assert_eq!(b.get(i, j), want, "({i}, {j})");
        }
    }

    // the Gaussian peak at d = 6 is cut off by a span of 2
    let hard = adaptive_soft_mask(2.0, 1e-9, 10).unwrap();
    let b = combined_bias(&g, &hard).unwrap();
    assert_eq!(g.get(6, 0), 0.0);
    assert_eq!(b.get(6, 0), NEG_INF);

    let small = adaptive_soft_mask(2.0, 3.0, 4).unwrap();
    assert!(matches!(combined_bias(&g, &small), Err(Error::Dimension { .. })));
}

#[test]
fn single_token_attends_to_itself() {
    let s = Setup::new(3, 1, 8, 2, 1);
    for kind in AttentionKind::ALL {
        let w = s.attend(kind, 3.0, &[derived(6.0, 6.0, 1.0); 2]);
        assert_eq!(w, vec![1.0; 6], "{kind}");
    }
}

#[test]
fn zero_content_gaussian_matches_closed_form() {
    let s = Setup::new(2, 10, 8, 2, 2).without_content();
    let heads = [derived(6.0, 6.0, 1.0), derived(6.0, 2.5, 1.7)];
    let w = s.attend(AttentionKind::Gaussian, 3.0, &heads);
    let mut worst: f64 = 0.0;
    for (k, row) in w.chunks(10).enumerate() {
        let i = k % 10;
        let p = heads[(k / 10) % 2];
        let (mu, sigma) = (p.mu, p.sigma());
        let e: Vec<f64> = (0..=i)
            .map(|j| {
                let x = (i - j) as f64 - mu;
                (-(x * x) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let z: f64 = e.iter().sum();
        for j in 0..10 {
            let want = if j <= i { e[j] / z } else { 0.0 };
            worst = worst.max((row[j] - want).abs());
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn tiny_ramp_gives_hard_window_uniform() {
    let s = Setup::new(2, 10, 8, 2, 3).without_content();
    let spans = [2.0, 4.0];
    let heads = [derived(spans[0], 6.0, 1.0), derived(spans[1], 6.0, 1.0)];
    let w = s.attend(AttentionKind::Adaptive, 1e-6, &heads);
    let mut worst: f64 = 0.0;
    for (k, row) in w.chunks(10).enumerate() {
        let i = k % 10;
        let l = spans[(k / 10) % 2] as usize;
        let allowed = i.min(l) + 1;
        for (j, &v) in row.iter().enumerate() {
            let want = if j <= i && i - j <= l {
                1.0 / allowed as f64
            } else {
                0.0
            };
            worst = worst.max((v - want).abs());
        }
    }
    assert!(worst <= 1e-9, "max deviation {worst:e}");
}

#[test]
fn gaam_mass_stays_inside_ramp_support() {
    let s = Setup::new(2, 10, 8, 2, 4);
    let (span, r) = (2.0, 3.0);
    let w = s.attend(
        AttentionKind::Gaam,
        r,
        &[derived(span, 6.0, 1.0), derived(span, 7.0, 2.0)],
    );
    for (i, row) in rows(&w, 10) {
        for (j, &v) in row.iter().enumerate() {
            if j <= i && (i - j) as f64 >= span + r {
                assert_eq!(v, 0.0, "row {i} key {j}");
            }
        }
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn huge_sigma_reduces_to_causal() {
    let s = Setup::new(2, 10, 8, 2, 5);
    let causal = s.attend(AttentionKind::Causal, 3.0, &[derived(6.0, 6.0, 1.0); 2]);
    let wide = s.attend(AttentionKind::Gaussian, 3.0, &[derived(6.0, 6.0, 1e4); 2]);
    let dev = causal.iter().zip(&wide).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-3, "max deviation {dev:e}");
}

#[test]
fn span_beyond_sequence_reduces_to_causal() {
    let s = Setup::new(2, 10, 8, 2, 6);
    let causal = s.attend(AttentionKind::Causal, 3.0, &[derived(6.0, 6.0, 1.0); 2]);
    let wide = s.attend(AttentionKind::Adaptive, 3.0, &[derived(12.0, 6.0, 1.0); 2]);
    for (a, b) in causal.iter().zip(&wide) {
        // only the renormalization by a row sum of one may differ, by rounding
        assert!((a - b).abs() <= 4.0 * f64::EPSILON, "{a} vs {b}");
    }
}

#[test]
fn missing_prior_or_bad_heads_are_errors() {
    let s = Setup::new(1, 4, 8, 2, 7);
    let mut tape = Tape::new();
    let err = s
        .run(
            &mut tape,
            PriorVars::default(),
            &s.settings(AttentionKind::Gaussian, 3.0),
        )
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let bad = AttentionSettings {
        heads: 3,
        ..s.settings(AttentionKind::Causal, 3.0)
    };
    let err = s.run(&mut tape, PriorVars::default(), &bad).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}

/// Grad check of a weighted sum of the context with respect to one family
/// of prior parameters, the others held at `base`.
fn prior_grad_error(kind: AttentionKind, family: usize, base: &[PriorParams]) -> f64 {
    let s = Setup::new(2, 10, 8, 2, 8);
    let settings = s.settings(kind, 3.0);
    let pick = |p: &PriorParams| [p.raw_span, p.mu, p.raw_sigma][family];
    let x = Tensor::new(vec![base.len()], base.iter().map(pick).collect()).unwrap();
    grad_check(
        |tape, v| {
            let mut priors = prior_constants(tape, base);
            match family {
                0 => priors.raw_span = Some(v),
                1 => priors.mu = Some(v),
                _ => priors.raw_sigma = Some(v),
            }
            let (ctx, _) = s.run(tape, priors, &settings)?;
            weighted_sum(tape, ctx)
        },
        &x,
        1e-5,
    )
    .unwrap()
}

#[test]
fn prior_parameters_pass_gradient_check() {
    // spans off the integer grid keep every distance off the ramp kinks
    let base = [derived(3.4, 4.3, 1.3), derived(5.7, 2.2, 0.8)];
    let cases = [
        (AttentionKind::Adaptive, 0),
        (AttentionKind::Gaussian, 1),
        (AttentionKind::Gaussian, 2),
        (AttentionKind::Gaam, 0),
        (AttentionKind::Gaam, 1),
        (AttentionKind::Gaam, 2),
    ];
    for (kind, family) in cases {
        let err = prior_grad_error(kind, family, &base);
        assert!(err < 1e-4, "{kind} family {family}: {err:e}");
    }
}

#[test]
fn derived_initial_values_are_exact() {
    let p = PriorParams::from_derived(6.0, 6.0, 1.0).unwrap();
    assert_eq!(p.span(20.0), 6.0);
    assert_eq!(p.sigma(), 1.0);
    assert_eq!(PriorParams::from_derived(10.0, 6.0, 1.0).unwrap().span(20.0), 10.0);
    assert!(raw_span_for(0.0).is_err());
    assert!(raw_sigma_for(1e-3).is_err());
}

fn kind_strategy() -> impl Strategy<Value = AttentionKind> {
    prop::sample::select(AttentionKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_are_causal_and_normalized(
        kind in kind_strategy(),
        span in 0.05f64..19.0,
        mu in -3.0f64..12.0,
        sigma in 0.2f64..8.0,
        seed in 0u64..1000,
    ) {
        let s = Setup::new(2, 7, 8, 2, seed);
        let w = s.attend(kind, 3.0, &[derived(span, mu, sigma), derived(20.0 - span, mu + 1.0, sigma)]);
        for (i, row) in rows(&w, 7) {
            let future: f64 = row[i + 1..].iter().sum();
            prop_assert_eq!(future, 0.0);
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-10, "row sum {}", total);
        }
    }

    #[test]
    fn shrinking_span_never_grows_tail_mass(
        big in 1.0f64..12.0,
        shrink in 0.05f64..1.0,
        seed in 0u64..1000,
    ) {
        let small = big * shrink;
        let s = Setup::new(1, 10, 8, 2, seed);
        let wide = s.attend(AttentionKind::Adaptive, 3.0, &[derived(big, 6.0, 1.0); 2]);
        let narrow = s.attend(AttentionKind::Adaptive, 3.0, &[derived(small, 6.0, 1.0); 2]);
        for ((i, a), (_, b)) in rows(&wide, 10).zip(rows(&narrow, 10)) {
            for j in 0..=i {
                let d = (i - j) as f64;
                if d > small + 3.0 {
                    prop_assert!(b[j] <= a[j], "row {} key {}: {} > {}", i, j, b[j], a[j]);
                }
                // mass at offsets of at least d never grows as the span shrinks
                let tail_a: f64 = a[..=j].iter().sum();
                let tail_b: f64 = b[..=j].iter().sum();
                prop_assert!(tail_b <= tail_a + 1e-12, "row {} tail from {}: {} > {}", i, j, tail_b, tail_a);
            }
        }
    }
}
