use bionet::arch::{ArchConfig, Network, Plan, Topology};
use bionet::cost::{count_macs, count_stored_params, report};
use bionet::data::{generate_split, load_dataset, save_dataset, DataSpec};
use bionet::nas::{phase1_search, progressive_search, Phase1Config, Phase2Config};
use bionet::train::{evaluate, train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("core_pipeline");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn search_then_retrain_the_result() {
    let spec = DataSpec::new(16, 16, 3, 0.05, 5);
    let (tr, va) = generate_split(&spec, 8, 4).unwrap();
    let sup = ArchConfig::bionet_pp(2, 3, 2).with_classes(1, 3);
    let dense = Topology::dense(&sup).unwrap();

    let net = Network::<f64>::build_bionet_pp(&sup, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let p1 = phase1_search(net, &tr, &Phase1Config::new(1, 4, 1e-3, 2)).unwrap();
    assert!(p1.topology.is_subset_of(&dense));

    let p2 = progressive_search::<f64>(&p1.topology, &tr, &va, &Phase2Config::new(2, 1, 4, 1e-3, 3)).unwrap();
    assert!(p2.fair);
    assert_eq!(p2.pairs, vec![3, 2, 1]);
    assert!(p2.topology.is_subset_of(&p1.topology));
    let macs = |t: &Topology| count_macs(&Plan::compile(t), 16, 16).unwrap();
    assert!(macs(&p2.topology) <= macs(&p1.topology));
    assert!(macs(&p1.topology) <= macs(&dense));

    let path = scratch("bix.json");
    p2.topology.save(&path).unwrap();
    let bix = Topology::load(&path).unwrap();
    assert_eq!(bix, p2.topology);
    let net = Network::<f64>::instantiate_subnet(&sup, &bix, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(count_stored_params(&net), report("bix", net.plan(), 16, 16).unwrap().params);
    let trained = train(net, &tr, &va, &TrainConfig::new(2, 4, 1e-3, 6)).unwrap();
    assert_eq!(trained.history.records.len(), 2);
    let mut best = trained.net;
    let ev = evaluate(&mut best, &va, 4).unwrap();
    assert!((ev.metrics.miou - trained.best_miou.unwrap()).abs() < 1e-12);
}

#[test]
fn datasets_survive_disk() {
    let spec = DataSpec::new(8, 8, 4, 0.2, 9);
    let (tr, _) = generate_split(&spec, 5, 1).unwrap();
    let path = scratch("train.bin");
    save_dataset(&tr, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.samples.len(), 5);
    for (a, b) in tr.samples.iter().zip(&back.samples) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
}
