use krt_core::losses::{asl_loss, token_loss, LossConfig};
use krt_tensor::gradcheck::check_gradients;
use krt_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn tensor(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn token_value(prev: &[Vec<f64>], curr: &[Vec<f64>], b: usize, d: usize) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let p: Vec<Var> = prev.iter().map(|e| tape.constant(tensor([b, d], e))).collect();
    let c: Vec<Var> = curr.iter().map(|e| tape.constant(tensor([b, d], e))).collect();
    let l = token_loss(&mut tape, &p, &c, Default::default()).unwrap();
    tape.value(l).data()[0]
}

fn random_rows(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Hand cosine over the concatenated per-item vectors, averaged over items.
fn hand_token(prev: &[Vec<f64>], curr: &[Vec<f64>], b: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..b {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (p, c) in prev.iter().zip(curr) {
            for j in 0..d {
                let (x, y) = (p[i * d + j], c[i * d + j]);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
        }
        total += dot / (na.sqrt() * nb.sqrt());
    }
    1.0 - total / b as f64
}

#[test]
fn identical_and_negated_prefixes() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let (b, d) = (4, 8);
    let prev: Vec<Vec<f64>> = (0..2).map(|_| random_rows(&mut rng, b * d)).collect();
    let mut curr = prev.clone();
    curr.push(random_rows(&mut rng, b * d));
    assert!(token_value(&prev, &curr, b, d).abs() <= 1e-12);
    let mut negated: Vec<Vec<f64>> = prev.iter().map(|e| e.iter().map(|x| -x).collect()).collect();
    negated.push(curr[2].clone());
    assert!((token_value(&prev, &negated, b, d) - 2.0).abs() <= 1e-12);
}

#[test]
fn matches_hand_cosine_for_three_sessions() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let (b, d) = (1, 8);
    for _ in 0..20 {
        let prev: Vec<Vec<f64>> = (0..2).map(|_| random_rows(&mut rng, b * d)).collect();
        let curr: Vec<Vec<f64>> = (0..3).map(|_| random_rows(&mut rng, b * d)).collect();
        let got = token_value(&prev, &curr, b, d);
        assert!((got - hand_token(&prev, &curr[..2], b, d)).abs() < 1e-12);
    }
}

#[test]
fn bounds_hold_on_random_pairs() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1000);
    for _ in 0..1000 {
        let t = rng.gen_range(2..=4);
        let b = rng.gen_range(1..=3);
        let d = rng.gen_range(1..=6);
        let prev: Vec<Vec<f64>> = (0..t - 1).map(|_| random_rows(&mut rng, b * d)).collect();
        let curr: Vec<Vec<f64>> = (0..t).map(|_| random_rows(&mut rng, b * d)).collect();
        let v = token_value(&prev, &curr, b, d);
        assert!((-1e-12..=2.0 + 1e-12).contains(&v), "token loss {v}");
    }
}

fn asl_value(p: &[f64], y: &[f64], rows: usize, cfg: &LossConfig) -> f64 {
    let cols = p.len() / rows;
    let mut tape: Tape<f64> = Tape::new();
    let pv = tape.constant(tensor([rows, cols], p));
    let yv = tape.constant(tensor([rows, cols], y));
    let l = asl_loss(&mut tape, pv, yv, cfg).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn zero_focusing_is_mean_bce() {
    let cfg = LossConfig {
        gamma_pos: 0.0,
        gamma_neg: 0.0,
        ..LossConfig::default()
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
    for _ in 0..200 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=5);
        let p: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let y: Vec<f64> = (0..rows * cols)
            .map(|_| f64::from(u8::from(rng.gen_bool(0.5))))
            .collect();
        let bce = p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / p.len() as f64;
        assert!((asl_value(&p, &y, rows, &cfg) - bce).abs() < 1e-9);
    }
}

/// ln 2 from the series `2 Σ (1/3)^(2k+1) / (2k+1)`, independent of `f64::ln`.
fn ln2_series() -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0 / 3.0;
    for k in 0..40 {
        sum += term / (2 * k + 1) as f64;
        term /= 9.0;
    }
    2.0 * sum
}

#[test]
fn focused_negative_at_one_half() {
    let expected = 0.5f64.powi(4) * ln2_series();
    assert!((expected - 0.04332).abs() < 1e-5);
    let got = asl_value(&[0.5], &[0.0], 1, &LossConfig::default());
    assert!((got - expected).abs() < 1e-5);
    assert!((got - 0.04332).abs() < 1e-5);
}

#[test]
fn asl_gradient_through_sigmoid() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
    for _ in 0..20 {
        let logits = tensor([3, 4], &random_rows(&mut rng, 12));
        let y: Vec<f64> = (0..12).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let cfg = LossConfig {
            gamma_pos: rng.gen_range(0.0..2.0),
            gamma_neg: rng.gen_range(0.0..5.0),
            ..LossConfig::default()
        };
        let report = check_gradients(
            &[logits],
            |tape, v| {
                let p = tape.sigmoid_clamped(v[0], cfg.clamp_eps)?;
                let t = tape.constant(tensor([3, 4], &y));
                Ok(asl_loss(tape, p, t, &cfg).expect("asl"))
            },
            1e-5,
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

proptest! {
    #[test]
    fn asl_is_non_negative(
        p in prop::collection::vec(1e-7f64..1.0 - 1e-7, 1..20),
        bits in prop::collection::vec(any::<bool>(), 20),
        gp in 0.0f64..4.0,
        gn in 0.0f64..6.0,
    ) {
        let y: Vec<f64> = p.iter().zip(&bits).map(|(_, &b)| f64::from(u8::from(b))).collect();
        let cfg = LossConfig { gamma_pos: gp, gamma_neg: gn, ..LossConfig::default() };
        prop_assert!(asl_value(&p, &y, 1, &cfg) >= 0.0);
    }
}
