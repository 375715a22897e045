use cpgan_core::trainer::{train, Mode, TrainConfig};
use std::path::PathBuf;

#[test]
#[ignore]
fn dir_check() {
    for (mode, tag) in [(Mode::SsCpgan, "ss"), (Mode::CpganBaseline, "base")] {
        let cfg = TrainConfig {
            dataset: "synthetic://11/512".into(),
            resolution: 48,
            batch_size: 16,
            total_steps: 1500,
            eval_every: 250,
            checkpoint_every: 1500,
            seed: 101,
            mode,
            pseudo_cache_dir: PathBuf::from("/tmp/dir_cache"),
            out_dir: PathBuf::from("/tmp/dir_runs"),
            run_name: tag.into(),
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let dir = train(&cfg).unwrap();
        println!("== {} ({:?})", tag, t0.elapsed());
        let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if !cols[6].is_empty() {
                println!(
                    "step={} lambda={} sched_iou={:.3} fid={:.4} miou={:.4} fg_iou={:.4} degen={}",
                    cols[0], cols[4],
                    cols[5].parse::<f64>().unwrap_or(0.0),
                    cols[6].parse::<f64>().unwrap_or(0.0),
                    cols[7].parse::<f64>().unwrap_or(0.0),
                    cols[8].parse::<f64>().unwrap_or(0.0),
                    cols[9]
                );
            }
        }
    }
}
