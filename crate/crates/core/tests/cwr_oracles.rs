use std::collections::BTreeMap;

use bnncl_core::cwr::{argmax, cross_entropy, head_gradients, softmax, CwrState, HeadLayer, Precision, QuantConfig};
use bnncl_core::fixedpoint::{calibrate, Bits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut impl Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn logits(w: &[f64], b: &[f64], a: &[f64]) -> Vec<f64> {
    let d = a.len();
    b.iter().enumerate().map(|(i, bi)| bi + (0..d).map(|j| w[i * d + j] * a[j]).sum::<f64>()).collect()
}

fn loss(w: &[f64], b: &[f64], a: &[f64], t: usize) -> f64 {
    cross_entropy(&softmax(&logits(w, b, a)), t)
}

fn close(a: f64, f: f64) -> bool {
    (a - f).abs() <= 1e-5 * a.abs().max(f.abs()).max(1e-3)
}

#[test]
fn head_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let h = 1e-5;
    for trial in 0..100 {
        let m = if trial % 2 == 0 { 2 } else { 10 };
        let d = rng.random_range(1..=64);
        let w = uniform(&mut rng, m * d, 0.5);
        let b = uniform(&mut rng, m, 0.5);
        let a = uniform(&mut rng, d, 1.0);
        let t = rng.random_range(0..m);
        let (dw, db) = head_gradients(&a, &softmax(&logits(&w, &b, &a)), t).unwrap();
        for k in 0..m * d {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (loss(&up, &b, &a, t) - loss(&down, &b, &a, t)) / (2.0 * h);
            assert!(close(dw[k], fd), "dw[{k}] {} vs {fd}", dw[k]);
        }
        for k in 0..m {
            let (mut up, mut down) = (b.clone(), b.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (loss(&w, &up, &a, t) - loss(&w, &down, &a, t)) / (2.0 * h);
            assert!(close(db[k], fd), "db[{k}] {} vs {fd}", db[k]);
        }
    }
}

#[test]
fn thirty_two_bit_head_tracks_float() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (m, d) = (10, 64);
    let mut agree = 0;
    let total = 1000;
    for _ in 0..total {
        let w = uniform(&mut rng, m * d, 0.3);
        let b = uniform(&mut rng, m, 0.3);
        let a = uniform(&mut rng, d, 2.0);
        let all: Vec<f64> = w.iter().chain(&b).copied().collect();
        let float = HeadLayer::float(m, d, w.clone(), b.clone()).unwrap().forward(&a).unwrap();
        let (fixed, sat) = HeadLayer::fixed(m, d, &w, &b, calibrate(&all, Bits::B32).unwrap()).unwrap();
        assert_eq!(sat, 0);
        let q = fixed.forward(&a).unwrap();
        for (p, r) in q.probs.iter().zip(&float.probs) {
            assert!((p - r).abs() <= 1e-4);
        }
        agree += (argmax(&q.probs) == argmax(&float.probs)) as usize;
    }
    assert!(agree * 100 >= total * 99, "{agree}/{total}");
}

#[test]
fn probabilities_sum_to_one_at_every_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for p in Precision::SWEEP {
        for _ in 0..200 {
            let (m, d) = (rng.random_range(2..12), rng.random_range(1..40));
            let w = uniform(&mut rng, m * d, 2.0);
            let b = uniform(&mut rng, m, 2.0);
            let a = uniform(&mut rng, d, 5.0);
            let layer = match p {
                Precision::Float => HeadLayer::float(m, d, w, b).unwrap(),
                Precision::Fixed(bits) => {
                    let all: Vec<f64> = w.iter().chain(&b).copied().collect();
                    HeadLayer::fixed(m, d, &w, &b, calibrate(&all, bits).unwrap()).unwrap().0
                }
            };
            let probs = layer.forward(&a).unwrap().probs;
            assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{p}");
            assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}

fn random_state(rng: &mut impl Rng, classes: &[u32], d: usize, config: QuantConfig) -> CwrState {
    let m = classes.len();
    let cw = uniform(rng, m * d, 0.5);
    let bias = uniform(rng, m, 0.5);
    let past = (0..m).map(|_| rng.random_range(0..500)).collect();
    CwrState::from_consolidated(d, config, classes.to_vec(), cw, bias, past).unwrap()
}

#[test]
fn partial_preload_copies_only_batch_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let classes: Vec<u32> = (0..8).collect();
    let d = 12;
    for _ in 0..20 {
        let mut state = random_state(&mut rng, &classes, d, QuantConfig::uniform(Precision::Float, 0.01).unwrap());
        let batch: Vec<u32> = classes.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        state.preload_tw(&batch).unwrap();
        let tw = state.tw_hp().weights().to_real();
        let tb = state.tw_hp().bias().to_real();
        for (i, c) in classes.iter().enumerate() {
            let keep = batch.contains(c);
            for j in 0..d {
                let expect = if keep { state.cw()[i * d + j] } else { 0.0 };
                assert_eq!(tw[i * d + j], expect);
            }
            assert_eq!(tb[i], if keep { state.cw_bias()[i] } else { 0.0 });
        }
    }
}

#[test]
fn low_precision_copy_is_always_derived() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let classes: Vec<u32> = (0..5).collect();
    let d = 10;
    for lp in Precision::SWEEP {
        for hp in Precision::SWEEP.iter().copied().filter(|&h| QuantConfig::new(lp, h, 0.05).is_ok()) {
            let config = QuantConfig::new(lp, hp, 0.05).unwrap();
            let mut state = random_state(&mut rng, &classes, d, config);
            state.preload_tw(&classes[..3]).unwrap();
            assert_eq!(state.tw_lp(), &state.derive_lp().unwrap());
            for _ in 0..10 {
                let feats: Vec<Vec<f64>> = (0..6).map(|_| uniform(&mut rng, d, 1.0)).collect();
                let labels: Vec<u32> = (0..6).map(|k| k % 3).collect();
                state.train_minibatch(&feats, &labels, true).unwrap();
                assert_eq!(state.tw_lp(), &state.derive_lp().unwrap(), "lp {lp} hp {hp}");
            }
            state.expand_head(&[9]);
            assert_eq!(state.tw_lp(), &state.derive_lp().unwrap());
        }
    }
}

#[test]
fn past_counts_accumulate_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let d = 4;
    let mut state = CwrState::new(d, QuantConfig::uniform(Precision::Fixed(Bits::B16), 0.01).unwrap());
    let mut expect: BTreeMap<u32, u64> = BTreeMap::new();
    for _ in 0..30 {
        let classes: Vec<u32> = (0..6u32).filter(|_| rng.random_bool(0.4)).collect();
        if classes.is_empty() {
            continue;
        }
        state.expand_head(&classes);
        state.preload_tw(&classes).unwrap();
        let counts: BTreeMap<u32, u64> = classes.iter().map(|&c| (c, rng.random_range(1..200))).collect();
        state.consolidate(&counts).unwrap();
        for (c, n) in &counts {
            *expect.entry(*c).or_default() += n;
        }
        for (c, n) in &expect {
            assert_eq!(state.past()[state.class_index(*c).unwrap()], *n);
        }
    }
}

#[test]
fn thirty_two_bit_training_follows_float_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let classes: Vec<u32> = (0..4).collect();
    let d = 8;
    let fixed = QuantConfig::uniform(Precision::Fixed(Bits::B32), 0.05).unwrap();
    let float = QuantConfig::uniform(Precision::Float, 0.05).unwrap();
    let base = random_state(&mut rng, &classes, d, fixed);
    let rebuild = |config| {
        CwrState::from_consolidated(d, config, classes.clone(), base.cw().to_vec(), base.cw_bias().to_vec(), base.past().to_vec())
            .unwrap()
    };
    let mut q = rebuild(fixed);
    let mut f = rebuild(float);
    q.preload_tw(&classes).unwrap();
    f.preload_tw(&classes).unwrap();
    let step = q.tw_hp().params().unwrap().scale();
    for _ in 0..100 {
        let feats: Vec<Vec<f64>> = (0..8).map(|_| uniform(&mut rng, d, 1.0)).collect();
        let labels: Vec<u32> = (0..8).map(|_| rng.random_range(0..4)).collect();
        q.train_minibatch(&feats, &labels, false).unwrap();
        f.train_minibatch(&feats, &labels, false).unwrap();
    }
    let qw = q.tw_hp().weights().to_real();
    let fw = f.tw_hp().weights().to_real();
    let worst = qw.iter().zip(&fw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 10.0 * step, "drift {} steps", worst / step);
}

/// Plain re-statement of the CWR* loop over float weights.
struct Reference {
    d: usize,
    lr: f64,
    cw: BTreeMap<u32, (Vec<f64>, f64, u64)>,
}

impl Reference {
    fn experience(&mut self, batches: &[(Vec<Vec<f64>>, Vec<u32>)]) {
        let mut present: Vec<u32> = batches.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        present.sort();
        present.dedup();
        for &c in &present {
            self.cw.entry(c).or_insert((vec![0.0; self.d], 0.0, 0));
        }
        let order: Vec<u32> = self.cw.keys().copied().collect();
        let m = order.len();
        let d = self.d;
        let mut w = vec![0.0; m * d];
        let mut b = vec![0.0; m];
        for (i, c) in order.iter().enumerate() {
            if present.contains(c) {
                w[i * d..(i + 1) * d].copy_from_slice(&self.cw[c].0);
                b[i] = self.cw[c].1;
            }
        }
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for (feats, labels) in batches {
            let mut gw = vec![0.0; m * d];
            let mut gb = vec![0.0; m];
            for (a, l) in feats.iter().zip(labels) {
                *counts.entry(*l).or_default() += 1;
                let t = order.iter().position(|c| c == l).unwrap();
                let (dw, db) = head_gradients(a, &softmax(&logits(&w, &b, a)), t).unwrap();
                gw.iter_mut().zip(dw).for_each(|(g, x)| *g += x / feats.len() as f64);
                gb.iter_mut().zip(db).for_each(|(g, x)| *g += x / feats.len() as f64);
            }
            w.iter_mut().zip(gw).for_each(|(x, g)| *x -= self.lr * g);
            b.iter_mut().zip(gb).for_each(|(x, g)| *x -= self.lr * g);
        }
        let rows: Vec<usize> = present.iter().map(|c| order.iter().position(|o| o == c).unwrap()).collect();
        let k = rows.len() as f64;
        let avg_w: Vec<f64> = (0..d).map(|j| rows.iter().map(|&i| w[i * d + j]).sum::<f64>() / k).collect();
        let avg_b = rows.iter().map(|&i| b[i]).sum::<f64>() / k;
        for (&c, &i) in present.iter().zip(&rows) {
            let cur = counts[&c];
            let entry = self.cw.get_mut(&c).unwrap();
            let wpast = (entry.2 as f64 / cur as f64).sqrt();
            for j in 0..d {
                entry.0[j] = (entry.0[j] * wpast + w[i * d + j] - avg_w[j]) / (wpast + 1.0);
            }
            entry.1 = (entry.1 * wpast + b[i] - avg_b) / (wpast + 1.0);
            entry.2 += cur;
        }
    }
}

#[test]
fn float_state_replays_reference_over_three_experiences() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let d = 16;
    let lr = 0.1;
    let mut state = CwrState::new(d, QuantConfig::uniform(Precision::Float, lr).unwrap());
    let mut reference = Reference { d, lr, cw: BTreeMap::new() };
    let experience_classes: [&[u32]; 3] = [&[0, 1], &[2, 3, 1], &[4, 0]];
    for classes in experience_classes {
        let batches: Vec<(Vec<Vec<f64>>, Vec<u32>)> = (0..12)
            .map(|_| {
                let labels: Vec<u32> = (0..10).map(|_| classes[rng.random_range(0..classes.len())]).collect();
                let feats = labels
                    .iter()
                    .map(|&l| (0..d).map(|j| if j % 5 == l as usize { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3)).collect())
                    .collect();
                (feats, labels)
            })
            .collect();
        let mut present: Vec<u32> = batches.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        present.sort();
        present.dedup();
        state.expand_head(&present);
        state.preload_tw(&present).unwrap();
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for (feats, labels) in &batches {
            state.train_minibatch(feats, labels, false).unwrap();
            for &l in labels {
                *counts.entry(l).or_default() += 1;
            }
        }
        state.consolidate(&counts).unwrap();
        reference.experience(&batches);

        for (c, (w, b, past)) in &reference.cw {
            let i = state.class_index(*c).unwrap();
            for j in 0..d {
                assert!((state.cw()[i * d + j] - w[j]).abs() <= 1e-6);
            }
            assert!((state.cw_bias()[i] - b).abs() <= 1e-6);
            assert_eq!(state.past()[i], *past);
        }
    }
}

#[test]
fn eight_bit_gradient_error_exceeds_sixteen_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    let classes: Vec<u32> = (0..10).collect();
    let d = 64;
    let trials = 200;
    let mut ordered = 0;
    for _ in 0..trials {
        let cw = uniform(&mut rng, classes.len() * d, 0.2);
        let bias = uniform(&mut rng, classes.len(), 0.2);
        let past = vec![100; classes.len()];
        let feats: Vec<Vec<f64>> = (0..32).map(|_| uniform(&mut rng, d, 3.0)).collect();
        let labels: Vec<u32> = (0..32).map(|_| rng.random_range(0..10)).collect();
        let mae = |bits| {
            let config = QuantConfig::uniform(Precision::Fixed(bits), 0.01).unwrap();
            let mut s = CwrState::from_consolidated(d, config, classes.clone(), cw.clone(), bias.clone(), past.clone()).unwrap();
            s.preload_tw(&classes).unwrap();
            s.gradient_mae(&feats, &labels).unwrap()
        };
        ordered += (mae(Bits::B8) > mae(Bits::B16)) as usize;
    }
    assert!(ordered * 100 >= trials * 95, "{ordered}/{trials}");
}

/// `cw` after one consolidation with `past = 0`, averaging `tw` over `rows`.
fn consolidated(tw: &[f64], d: usize, present: &[usize], rows: &[usize]) -> Vec<Vec<f64>> {
    let avg: Vec<f64> = (0..d).map(|j| rows.iter().map(|&i| tw[i * d + j]).sum::<f64>() / rows.len() as f64).collect();
    present.iter().map(|&i| (0..d).map(|j| tw[i * d + j] - avg[j]).collect()).collect()
}

#[test]
fn batch_mean_and_all_class_mean_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let d = 6;
    for (registered, batch) in [(4u32, vec![2u32, 3]), (3, vec![0, 1, 2])] {
        let classes: Vec<u32> = (0..registered).collect();
        let mut cw = uniform(&mut rng, classes.len() * d, 0.5);
        for &c in &batch {
            cw[c as usize * d..(c as usize + 1) * d].iter_mut().for_each(|w| *w = 0.0);
        }
        let mut past: Vec<u64> = vec![50; classes.len()];
        for &c in &batch {
            past[c as usize] = 0;
        }
        let config = QuantConfig::uniform(Precision::Float, 0.05).unwrap();
        let mut s = CwrState::from_consolidated(d, config, classes.clone(), cw.clone(), vec![0.0; classes.len()], past).unwrap();
        s.preload_tw(&batch).unwrap();
        for _ in 0..20 {
            let feats: Vec<Vec<f64>> = (0..8).map(|_| uniform(&mut rng, d, 1.0)).collect();
            let labels: Vec<u32> = (0..8).map(|k| batch[k % batch.len()]).collect();
            s.train_minibatch(&feats, &labels, false).unwrap();
        }
        let tw = s.tw_hp().weights().to_real();
        let present: Vec<usize> = batch.iter().map(|&c| c as usize).collect();
        let all: Vec<usize> = (0..classes.len()).collect();
        let by_batch = consolidated(&tw, d, &present, &present);
        let by_all = consolidated(&tw, d, &present, &all);
        s.consolidate(&batch.iter().map(|&c| (c, 10)).collect()).unwrap();
        for (k, &i) in present.iter().enumerate() {
            for j in 0..d {
                assert!((s.cw()[i * d + j] - by_batch[k][j]).abs() < 1e-12);
                assert!(by_all[k][j].is_finite());
            }
        }
        // Classes outside the batch keep their weights under either variant.
        for i in all.iter().filter(|i| !present.contains(i)) {
            assert_eq!(&s.cw()[i * d..(i + 1) * d], &cw[i * d..(i + 1) * d]);
        }
        let differ = by_batch.iter().flatten().zip(by_all.iter().flatten()).any(|(a, b)| (a - b).abs() > 1e-9);
        assert_eq!(differ, present.len() < all.len());
    }
}
