use std::time::Instant;
use wvad::data::{generate_synthetic, SynthConfig};
use wvad::trainer::{evaluate, fit, TrainConfig};

fn main() {
    let start = Instant::now();
    for seed in 0..5u64 {
        let t0 = Instant::now();
        let ds = generate_synthetic(&SynthConfig::separable(seed)).unwrap();
        let cfg = TrainConfig::desk(seed);
        let result = fit(&cfg, &ds, None).unwrap();
        let rep = evaluate(&result.params, &ds, cfg.metric, 1).unwrap();
        let last = result.curve.last().unwrap();
        println!(
            "seed {seed}: auc={:.4} ap={:.4} auc_abn={:.4} ap_abn={:.4}  L={:.3} K={}  ({:.1?})",
            rep.auc, rep.ap, rep.auc_abn, rep.ap_abn, last.total, last.selected_k, t0.elapsed()
        );
    }
    println!("total: {:.1?}", start.elapsed());
}
