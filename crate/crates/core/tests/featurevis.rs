use memscore::datasets::{generate_synthetic, TargetFn};
use memscore::featurevis::{
    activation_maximize, filter_activation, max_activating_images, FeatureSpec, VisConfig,
    VisError,
};
use memscore::image::ImageTensor;
use memscore::models::{Branch, ModelConfig, Network, Variant};
use memscore::nn::Layer;
use memscore::preprocess::{PipelineConfig, SimplePipelineConfig};

/// Memnet whose first filter computes the local mean intensity.
fn mean_filter_net() -> Network<f32> {
    let mut net = Network::build(&ModelConfig::tiny(Variant::Memnet), 0).unwrap();
    let trunk = net.branch_mut(Branch::Trunk).unwrap();
    let Layer::Conv(conv) = &mut trunk.layers[0].1 else {
        panic!("first trunk layer is not a convolution");
    };
    let k = conv.kernel();
    conv.weight
        .index_axis_mut(ndarray::Axis(0), 0)
        .fill(1.0 / (3 * k * k) as f32);
    conv.bias[[0]] = 0.0;
    net
}

#[test]
fn mean_intensity_filter_is_driven_up_tenfold() {
    let net = mean_filter_net();
    let spec = FeatureSpec::new("trunk.conv0", 0);
    let res = activation_maximize(&net, &spec, &VisConfig::default()).unwrap();
    assert_eq!(res.trace.len(), VisConfig::default().steps + 1);
    assert!(res.trace.windows(2).all(|w| w[1] >= w[0]));
    let (first, last) = (res.trace[0], *res.trace.last().unwrap());
    assert!(last >= 10.0 * first, "{first} -> {last}");
    assert!(res.image.0.iter().all(|v| (0.0..=1.0).contains(v)));
    let direct = filter_activation(&net, &spec, &res.image).unwrap();
    assert!((direct - last).abs() < 1e-6);
}

#[test]
fn zero_step_size_keeps_the_start_image() {
    let net = mean_filter_net();
    let spec = FeatureSpec::new("trunk.conv0", 0);
    let cfg = VisConfig {
        step_size: 0.0,
        steps: 10,
        ..VisConfig::default()
    };
    let res = activation_maximize(&net, &spec, &cfg).unwrap();
    assert!(res.trace.iter().all(|&v| v == res.trace[0]));
    assert!(res.image.0.iter().all(|&v| (0.0..=0.1).contains(&v)));
}

#[test]
fn visualization_is_deterministic_per_seed() {
    let net = Network::build(&ModelConfig::tiny(Variant::Resmem), 2).unwrap();
    let spec = FeatureSpec::new("backbone.block1", 1);
    let cfg = VisConfig {
        steps: 15,
        ..VisConfig::default()
    };
    let a = activation_maximize(&net, &spec, &cfg).unwrap();
    let b = activation_maximize(&net, &spec, &cfg).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.trace, b.trace);
    let c = activation_maximize(&net, &spec, &VisConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn bad_layer_and_filter_are_rejected() {
    let net = mean_filter_net();
    let cfg = VisConfig::default();
    assert!(activation_maximize(&net, &FeatureSpec::new("trunk.nope", 0), &cfg).is_err());
    assert!(matches!(
        activation_maximize(&net, &FeatureSpec::new("trunk.conv0", 10_000), &cfg),
        Err(VisError::FilterIndex { .. })
    ));
}

#[test]
fn dead_filter_is_reported() {
    let mut net = mean_filter_net();
    let trunk = net.branch_mut(Branch::Trunk).unwrap();
    if let Layer::Conv(conv) = &mut trunk.layers[0].1 {
        conv.weight.index_axis_mut(ndarray::Axis(0), 0).fill(0.0);
        conv.bias[[0]] = -1.0;
    }
    let err = activation_maximize(&net, &FeatureSpec::new("trunk.relu0", 0), &VisConfig::default());
    assert!(matches!(err, Err(VisError::DeadFilter { .. })));
}

#[test]
fn top_k_is_a_ranked_prefix() {
    let net = mean_filter_net();
    let spec = FeatureSpec::new("trunk.conv0", 0);
    let ds = generate_synthetic(40, 32, 4, TargetFn::TextureOnly).unwrap();
    let src = ds.memory_source();
    let pipe = PipelineConfig::Simple(SimplePipelineConfig::identity(32));
    let all = max_activating_images(&net, &spec, &ds.manifest, &src, &pipe, 40).unwrap();
    assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
    let top5 = max_activating_images(&net, &spec, &ds.manifest, &src, &pipe, 5).unwrap();
    assert_eq!(&all[..5], &top5[..]);

    // the mean filter ranks images by mean brightness
    let mut by_mean: Vec<(String, f32)> = ds
        .manifest
        .records
        .iter()
        .zip(&ds.images)
        .map(|(r, img)| (r.image_ref.clone(), img.mean()))
        .collect();
    by_mean.sort_by(|a, b| b.1.total_cmp(&a.1));
    assert_eq!(top5[0].0, by_mean[0].0);

    // ties keep manifest order
    let mut flat = ds.memory_source();
    let mut m = ds.manifest.clone();
    m.records.truncate(3);
    for r in &m.records {
        flat.insert(r.image_ref.clone(), ImageTensor::filled(3, 32, 32, 0.5));
    }
    let tied = max_activating_images(&net, &spec, &m, &flat, &pipe, 3).unwrap();
    let refs: Vec<&str> = tied.iter().map(|t| t.0.as_str()).collect();
    let expect: Vec<&str> = m.records.iter().map(|r| r.image_ref.as_str()).collect();
    assert_eq!(refs, expect);
}
