use rand::Rng;
use tape_core::degrade::{gen_clean_patch, Pair};
use tape_core::metrics::*;
use tape_core::rng::substream;
use tape_core::{Error, Tensor};

fn patch(seed: u64) -> Tensor {
    gen_clean_patch(16, 16, &mut substream(seed, "m")).unwrap()
}

#[test]
fn psnr_is_twenty_db_at_mse_one_hundredth() {
    // values in [0, 0.9] so the +0.1 shift needs no clipping
    let a = patch(1).map(|x| 0.9 * x);
    let b = a.map(|x| x + 0.1);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
}

#[test]
fn psnr_at_mse_one_half() {
    let a = Tensor::zeros(&[3, 8, 8]);
    let b = Tensor::from_fn(&[3, 8, 8], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    assert_eq!(mse(&a, &b).unwrap(), 0.5);
    assert!((psnr(&a, &b).unwrap() - 3.010299956639812).abs() < 1e-12);
}

#[test]
fn identical_images_hit_the_ideal_values() {
    for seed in 0..10 {
        let a = patch(seed);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn psnr_decreases_over_nested_perturbations() {
    let clean = patch(3);
    let mut rng = substream(3, "noise");
    let noise: Vec<f64> = (0..clean.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for k in 1..=10 {
        let eps = 0.01 * k as f64;
        let mut i = 0;
        let noisy = clean.map(|x| {
            i += 1;
            x + eps * noise[i - 1]
        });
        let p = psnr(&noisy, &clean).unwrap();
        assert!(p < last, "step {k}: {p} !< {last}");
        last = p;
    }
}

#[test]
fn ssim_is_symmetric_and_penalizes_inversion() {
    let a = patch(4);
    let b = patch(5);
    let ab = ssim(&a, &b).unwrap();
    assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    assert!((-1.0..=1.0).contains(&ab));
    let inv = a.map(|x| 1.0 - x);
    assert!(ssim(&a, &inv).unwrap() < 0.5);
}

#[test]
fn shape_errors() {
    let a = Tensor::zeros(&[3, 8, 8]);
    let b = Tensor::zeros(&[3, 8, 16]);
    assert!(matches!(psnr(&a, &b), Err(Error::Dimension(_))));
    assert!(matches!(ssim(&a, &b), Err(Error::Dimension(_))));
    let small = Tensor::zeros(&[3, 4, 4]);
    assert!(matches!(ssim(&small, &small), Err(Error::Dimension(_))));
}

fn pairs(n: usize) -> Vec<Pair> {
    (0..n)
        .map(|i| {
            let clean = patch(i as u64);
            Pair {
                corrupted: clean.map(|x| (x + 0.05).min(1.0)),
                clean,
                task: "toy".into(),
            }
        })
        .collect()
}

#[test]
fn report_aggregates_are_arithmetic_means() {
    let ps = pairs(5);
    let report = evaluate_with(&ps, |x| Ok(x.map(|v| v - 0.02))).unwrap();
    assert_eq!(report.count(), 5);
    let mean = report.psnr.iter().sum::<f64>() / 5.0;
    assert_eq!(report.mean_psnr(), mean);
    assert!(report.mean_psnr() > report.mean_input_psnr());
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 5 + 1);
    assert!(csv.starts_with("task,image,input_psnr,psnr,ssim"));
    assert!(report.table().contains("toy"));

    let single = evaluate_with(&ps[..1], |x| Ok(x.clone())).unwrap();
    assert_eq!(single.mean_ssim(), single.ssim[0]);
    assert_eq!(single.mean_psnr(), single.psnr[0]);
}

#[test]
fn perfect_restoration_reports_inf() {
    let ps = pairs(2);
    let clean: Vec<Tensor> = ps.iter().map(|p| p.clean.clone()).collect();
    let mut k = 0;
    let report = evaluate_with(&ps, |_| {
        k += 1;
        Ok(clean[k - 1].clone())
    })
    .unwrap();
    assert!(report.to_csv().contains(",inf,"));
}

#[test]
fn empty_set_is_rejected() {
    assert!(evaluate_with(&[], |x| Ok(x.clone())).is_err());
}
