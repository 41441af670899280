// scratch: inspect warm-started init
use probtte::synth::{gen_ground_truth, gen_network, gen_trips};
use probtte::training::*;
use probtte::inference::predict_prior;
use probtte::model::{ModelParams, TargetScale};

fn main() {
    let net = gen_network(10, 10).unwrap();
    let truth = gen_ground_truth(&net, 8, 8, 7, 3.0).unwrap();
    let trips = gen_trips(&truth, 20, 200, (10, 30), 2, 7).unwrap();
    let config = TrainConfig { b: 4, k: 2, p: 1, r_l: 8, r_h: 8, learning_rate: 1e-9,
        epochs: 1, patience: 1000, seed: 7, ..TrainConfig::default() };
    let (train_set, _, test_set) = split_trips(&trips, config.seed);
    // epochs=1 with lr ~ 0 gives back (almost) the warm-started init.
    let out = train_on_splits(&train_set, &[], &net, &config).unwrap();
    let n = test_set.len() as f64;
    let (mut pv, mut dv, mut tv, mut se) = (0.0, 0.0, 0.0, 0.0);
    for t in &test_set {
        let p = predict_prior(&t.links, &out.params, 0).unwrap();
        pv += p.var_s2; dv += p.components.day_var_s2; tv += p.components.trip_var_s2;
        se += (p.mean_s - t.total_s()).powi(2);
    }
    println!("init: prior var {:.0} (day {:.0} trip {:.0}) realized {:.0}", pv/n, dv/n, tv/n, se/n);
    let scale = out.params.scale();
    println!("scale: shift {} scale {:.2}", scale.shift, scale.scale);
    let bp = out.params.bucket(0).unwrap();
    println!("w_mu = {:?}", bp.w_mu.as_slice());
    let col0_norm = bp.l.column(0).norm();
    println!("L col0 norm {:.4}, L col1 norm {:.4}", col0_norm, bp.l.column(1).norm());
    let _ = ModelParams::init(1,1,1,1,0,TargetScale::default());
}
