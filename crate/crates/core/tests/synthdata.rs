use vmd_core::synthdata::{generate, holdout_split, GeneratorSpec, Sample, EXPERT_ADVANTAGE_NOISE_THRESHOLD};

/// L2-regularized logistic regression fitted by full-batch gradient descent
/// on standardized features; returns held-out accuracy.
fn probe_accuracy(train: &[(Vec<f64>, u8)], test: &[(Vec<f64>, u8)]) -> f64 {
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|(x, _)| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|(x, _)| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    let standardize = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|(x, _)| standardize(x)).collect();

    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..400 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (x, (_, y)) in xs.iter().zip(train) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - f64::from(*y);
            gb += r;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v);
        }
        b -= 0.5 * gb / n;
        for j in 0..d {
            w[j] -= 0.5 * (gw[j] / n + 1e-2 * w[j]);
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = b + standardize(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z >= 0.0) == (*y == 1)
        })
        .count();
    correct as f64 / test.len() as f64
}

fn probe(samples: &[Sample], idx: &[usize], view: fn(&Sample) -> &Vec<f64>) -> Vec<(Vec<f64>, u8)> {
    idx.iter().map(|&i| (view(&samples[i]).clone(), samples[i].label)).collect()
}

#[test]
fn expert_view_is_cleaner_than_student_view() {
    for noise_scale in [0.5, 1.0, 2.0, EXPERT_ADVANTAGE_NOISE_THRESHOLD] {
        let (mut expert, mut student) = (0.0, 0.0);
        for seed in 0..5 {
            let data = generate(&GeneratorSpec { noise_scale, seed, ..Default::default() }).unwrap();
            // half the samples held out keeps the accuracy estimate steady
            let split = holdout_split(&data, 0.5, 0.0, seed).unwrap();
            let s = &data.samples;
            expert += probe_accuracy(&probe(s, &split.train, |x| &x.x_e), &probe(s, &split.test, |x| &x.x_e));
            student += probe_accuracy(&probe(s, &split.train, |x| &x.x_s), &probe(s, &split.test, |x| &x.x_s));
        }
        assert!(expert > student, "noise {noise_scale}: expert probe {:.3} vs student {:.3}", expert / 5.0, student / 5.0);
    }
}
