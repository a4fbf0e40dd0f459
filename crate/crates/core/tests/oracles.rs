use ensembench_core::data::{synth_clusters, AugmentationPolicy};
use ensembench_core::embed::{silhouette, tsne, TsneConfig};
use ensembench_core::eval::{accuracy, jacobian_frobenius, predict, Members};
use ensembench_core::train::{train_member, Optimizer, TrainingSchedule};
use ensembench_core::zoo::{ArchitectureSpec, Head, ModelInstance};
use ensembench_core::{RngStream, Tensor};

/// Full central-difference Jacobian of the scores, in double precision.
fn numeric_frobenius(models: &[ModelInstance<f64>], x: &Tensor<f64>, eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += eps;
        let mut dn = x.clone();
        dn.data_mut()[i] -= eps;
        let a = predict(&Members(models), &up).unwrap();
        let b = predict(&Members(models), &dn).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            let d = (p - q) / (2.0 * eps);
            total += d * d;
        }
    }
    total.sqrt()
}

#[test]
fn conv_net_jacobian_matches_finite_differences() {
    for head in [Head::SoftmaxXe, Head::Cosine] {
        let spec = ArchitectureSpec::resnet(8, 2, 3).with_input(4, 4, 2).with_head(head);
        let models: Vec<ModelInstance<f64>> = (0..2)
            .map(|m| ModelInstance::build(&spec, &mut RngStream::new(4, m)).unwrap())
            .collect();
        let mut rng = RngStream::new(8, 0);
        let x = Tensor::from_vec(&[1, 4, 4, 2], (0..32).map(|_| rng.normal()).collect()).unwrap();
        let analytic = jacobian_frobenius(&Members(&models), &x).unwrap();
        let numeric = numeric_frobenius(&models, &x, 1e-5);
        let rel = (analytic - numeric).abs() / numeric;
        assert!(rel < 1e-4, "{:?}: {} vs {} ({})", head, analytic, numeric, rel);
    }
}

#[test]
fn tsne_separates_three_clusters() {
    let d = synth_clusters(3, 34, [4, 4, 1], 3.0, 5).unwrap();
    let s = 100;
    let feats: Vec<f64> = d.images()[..s * 16].iter().map(|&v| v as f64 / 255.0).collect();
    let res = tsne(&feats, s, &TsneConfig::default()).unwrap();
    let tail = &res.kl[res.kl.len() - 100..];
    for w in tail.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
    }
    let sil = silhouette(&res.coords, &d.labels()[..s]).unwrap();
    assert!(sil > 0.3, "{}", sil);
}

#[test]
fn trained_toy_reaches_full_train_accuracy() {
    let data = synth_clusters(2, 10, [16, 16, 3], 4.0, 9).unwrap();
    let spec = ArchitectureSpec::vgg(5, 2, 2).with_input(16, 16, 3).with_dropout(0.0);
    let sched = TrainingSchedule::new(50, Optimizer::sgd(0.05));
    let t = train_member(&spec, &data, &sched, &AugmentationPolicy::default(), 3).unwrap();
    let stats = ensembench_core::data::channel_means(&data).unwrap();
    assert_eq!(accuracy(&t.model, &data, &stats).unwrap(), 1.0);
}
