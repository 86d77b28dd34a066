//! Spatial regularizers over batch-pooled height profiles.
//!
//! A part's post-conv1 maps are pooled over channels and width into a
//! length-H profile, L1-normalized, and pulled towards a banded target by a
//! KL divergence; the aggregate profile over all parts is pulled towards the
//! uniform distribution. Targets are plain tensors and receive no gradient.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Batch- and width-pooled, L1-normalized response per feature-map row:
/// N×C₁×H×W → H. A fully zero map falls back to the uniform profile (as an
/// untracked constant).
pub fn part_profile(tape: &mut Tape, maps: Var) -> Result<Var> {
    let shape = tape.value(maps).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::contract(format!(
            "part_profile expects rank 4, got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let stacked = tape.reshape(maps, vec![n * c, h, w])?;
    profile_of_stacked(tape, stacked, h)
}

/// Aggregate profile of all K parts: the per-part map stacks are concatenated
/// along the channel dimension before pooling.
pub fn holistic_profile(tape: &mut Tape, per_part_maps: &[Var]) -> Result<Var> {
    if per_part_maps.is_empty() {
        return Err(Error::contract("holistic_profile with zero parts"));
    }
    let mut stacks = Vec::with_capacity(per_part_maps.len());
    let mut h = 0;
    for &maps in per_part_maps {
        let shape = tape.value(maps).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::contract(format!(
                "holistic_profile expects rank 4 maps, got {shape:?}"
            )));
        }
        h = shape[2];
        stacks.push(tape.reshape(maps, vec![shape[0] * shape[1], shape[2], shape[3]])?);
    }
    let all = tape.concat(0, &stacks)?;
    profile_of_stacked(tape, all, h)
}

fn profile_of_stacked(tape: &mut Tape, stacked: Var, h: usize) -> Result<Var> {
    let over_channels = tape.mean_axis(stacked, 0)?; // H×W
    let raw = tape.mean_axis(over_channels, 1)?; // H
    if tape.value(raw).data().iter().all(|&v| v == 0.0) {
        return Ok(tape.constant(Tensor::full(&[h], 1.0 / h as f64)));
    }
    Ok(tape.l1_normalize(raw))
}

/// Feasible range of the target amplitude for a given grid: both the on-part
/// and off-part probabilities must be non-negative.
pub fn gamma_band(h: usize, parts: usize) -> (f64, f64) {
    (1.0 / h as f64, parts as f64 / h as f64)
}

/// Banded target profile for part k: amplitude `gamma` on the part's H/K
/// rows, the complementary mass spread over the rest. Sums to one.
pub fn part_target(k: usize, parts: usize, h: usize, gamma: f64) -> Result<Tensor> {
    if parts == 0 || h == 0 || h % parts != 0 || k >= parts {
        return Err(Error::config(format!(
            "part target with k={k}, parts={parts}, rows={h}"
        )));
    }
    let (lo, hi) = gamma_band(h, parts);
    if !(lo..=hi).contains(&gamma) {
        return Err(Error::config(format!(
            "gamma {gamma} outside the feasible band [{lo}, {hi}] for H={h}, K={parts}"
        )));
    }
    let rows = h / parts;
    let off = if parts == 1 {
        0.0
    } else {
        (parts as f64 - gamma * h as f64) / (h as f64 * (parts as f64 - 1.0))
    };
    let mut data = vec![off; h];
    for r in k * rows..(k + 1) * rows {
        data[r] = gamma;
    }
    Ok(Tensor::from_parts(vec![h], data))
}

/// Uniform target used by the holistic regularizer.
pub fn holistic_target(h: usize) -> Tensor {
    Tensor::full(&[h], 1.0 / h as f64)
}

/// KL divergence of the prediction from a fixed target: Σ ẑ·log(ẑ/ż) with
/// 0·log(0/q) = 0 and the prediction clamped below at 1e-12 inside the log.
pub fn kl_loss(tape: &mut Tape, target: &Tensor, pred: Var) -> Result<Var> {
    tape.kl_div(target, pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn profile_concentrates_where_the_response_is() {
        let (n, c, h, w) = (2, 3, 6, 2);
        let mut data = vec![0.0; n * c * h * w];
        for i in 0..n {
            for ch in 0..c {
                for col in 0..w {
                    data[((i * c + ch) * h + 3) * w + col] = 1.0;
                }
            }
        }
        let mut tape = Tape::new();
        let maps = tape.leaf(Tensor::from_parts(vec![n, c, h, w], data), false);
        let p = part_profile(&mut tape, maps).unwrap();
        let d = tape.value(p).data();
        assert!((d[3] - 1.0).abs() < 1e-9);
        for (r, &v) in d.iter().enumerate() {
            if r != 3 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn constant_maps_give_uniform_profile() {
        let mut tape = Tape::new();
        let maps = tape.leaf(Tensor::full(&[2, 3, 6, 2], 0.7), false);
        let p = part_profile(&mut tape, maps).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_maps_fall_back_to_uniform() {
        let mut tape = Tape::new();
        let maps = tape.leaf(Tensor::zeros(&[2, 3, 6, 2]), false);
        let p = part_profile(&mut tape, maps).unwrap();
        for &v in tape.value(p).data() {
            assert_eq!(v, 1.0 / 6.0);
        }
    }

    #[test]
    fn profile_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..10 {
            let (n, c, h, w) = (3, 4, 6, 2);
            let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(0.0..2.0)).collect();
            let t = Tensor::from_parts(vec![n, c, h, w], data.clone());
            let mut tape = Tape::new();
            let maps = tape.leaf(t, false);
            let p = part_profile(&mut tape, maps).unwrap();

            let u = n * c;
            let mut raw = vec![0.0; h];
            for row in 0..h {
                let mut acc = 0.0;
                for i in 0..u {
                    for j in 0..w {
                        acc += data[(i * h + row) * w + j];
                    }
                }
                raw[row] = acc / (u * w) as f64;
            }
            let norm: f64 = raw.iter().sum::<f64>() + crate::tensor::NORM_EPS;
            for (row, &v) in tape.value(p).data().iter().enumerate() {
                assert!((v - raw[row] / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn part_target_paper_grid_constants() {
        // H=24, K=6, gamma=0.20: on-part 0.20 over 4 rows, off-part 0.01.
        let t = part_target(1, 6, 24, 0.20).unwrap();
        for (r, &v) in t.data().iter().enumerate() {
            if (4..8).contains(&r) {
                assert!((v - 0.20).abs() < 1e-15);
            } else {
                assert!((v - 0.01).abs() < 1e-15);
            }
        }
        assert!((t.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn part_target_boundaries() {
        // gamma = K/H nulls the off-part mass (the rigid variant).
        let t = part_target(0, 6, 12, 0.5).unwrap();
        assert_eq!(&t.data()[..2], &[0.5, 0.5]);
        assert!(t.data()[2..].iter().all(|&v| v == 0.0));
        // gamma = 1/H is the uniform target.
        let t = part_target(2, 6, 12, 1.0 / 12.0).unwrap();
        assert!(t.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        // Outside the band: rejected, with the band in the message.
        let err = part_target(0, 6, 12, 0.6).unwrap_err().to_string();
        assert!(err.contains("0.5"), "band missing from {err}");
    }

    #[test]
    fn part_targets_are_shifted_copies() {
        let h = 12;
        let t0 = part_target(0, 6, h, 0.3).unwrap();
        for k in 1..6 {
            let tk = part_target(k, 6, h, 0.3).unwrap();
            for r in 0..h {
                assert_eq!(tk.data()[r], t0.data()[(r + h - 2 * k) % h]);
            }
        }
    }

    #[test]
    fn kl_zero_iff_profiles_match() {
        let t = part_target(2, 6, 12, 0.3).unwrap();
        let mut tape = Tape::new();
        let same = tape.leaf(t.clone(), false);
        let l = kl_loss(&mut tape, &t, same).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let other = tape.leaf(holistic_target(12), false);
        let l = kl_loss(&mut tape, &t, other).unwrap();
        assert!(tape.value(l).item().unwrap() > 0.0);
    }

    #[test]
    fn complementary_parts_make_holistic_loss_zero() {
        // Each part responds uniformly on its own band with equal mass, so
        // the aggregate profile is exactly uniform.
        let (n, c, h, w, parts) = (2, 2, 6, 2, 3);
        let mut maps = Vec::new();
        let mut tape = Tape::new();
        for k in 0..parts {
            let mut data = vec![0.0; n * c * h * w];
            for i in 0..n {
                for ch in 0..c {
                    for r in k * 2..(k + 1) * 2 {
                        for col in 0..w {
                            data[((i * c + ch) * h + r) * w + col] = 0.8;
                        }
                    }
                }
            }
            maps.push(tape.leaf(Tensor::from_parts(vec![n, c, h, w], data), false));
        }
        let profile = holistic_profile(&mut tape, &maps).unwrap();
        let l = kl_loss(&mut tape, &holistic_target(h), profile).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn collapsed_parts_pay_the_guarded_penalty() {
        // All parts respond on the same single row. Every off-row prediction
        // entry hits the 1e-12 clamp, so the uniform-target KL is
        // (H-1)/H · ln((1/H)/1e-12) + 1/H · ln(1/H), far above ln H.
        let (n, c, h, w, parts) = (1, 1, 12, 1, 3);
        let mut maps = Vec::new();
        let mut tape = Tape::new();
        for _ in 0..parts {
            let mut data = vec![0.0; n * c * h * w];
            data[5] = 1.0;
            maps.push(tape.leaf(Tensor::from_parts(vec![n, c, h, w], data), false));
        }
        let profile = holistic_profile(&mut tape, &maps).unwrap();
        let l = kl_loss(&mut tape, &holistic_target(h), profile).unwrap();
        let got = tape.value(l).item().unwrap();
        let hf = h as f64;
        let on = tape.value(profile).data()[5];
        let expected =
            (hf - 1.0) / hf * ((1.0 / hf) / 1e-12).ln() + 1.0 / hf * ((1.0 / hf) / on).ln();
        assert!((got - expected).abs() < 1e-9, "got {got}, expected {expected}");
        assert!(got > hf.ln());
    }

    #[test]
    fn profile_scale_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let (n, c, h, w) = (2, 3, 6, 2);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(0.01..1.0)).collect();
        let base = Tensor::from_parts(vec![n, c, h, w], data.clone());
        let scaled = Tensor::from_parts(vec![n, c, h, w], data.iter().map(|v| v * 4.0).collect());
        let target = part_target(1, 3, h, 0.3).unwrap();
        let loss_of = |t: Tensor| {
            let mut tape = Tape::new();
            let m = tape.leaf(t, false);
            let p = part_profile(&mut tape, m).unwrap();
            let l = kl_loss(&mut tape, &target, p).unwrap();
            tape.value(l).item().unwrap()
        };
        // Power-of-two scaling keeps the normalized profile bit-identical up
        // to the epsilon in the denominator.
        assert!((loss_of(base) - loss_of(scaled)).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_through_profile_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..5 {
            let (n, c, h, w) = (2, 2, 6, 2);
            let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(0.05..1.0)).collect();
            let x = Tensor::from_parts(vec![n, c, h, w], data);
            let target = part_target(1, 3, h, 0.4).unwrap();
            let tc = target.clone();
            let err = grad_check(
                move |tape, v| {
                    let p = part_profile(tape, v)?;
                    kl_loss(tape, &tc.clone(), p)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "part KL rel err {err}");
        }
    }
}
