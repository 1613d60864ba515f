//! Convergence scout for the synthetic overfit suite: trains a nano model
//! on 16 shape images at 160 px and prints the mAP trajectory with wall
//! times, so the suite's epoch budget can be pinned from evidence.

use std::time::Instant;

use oxidet::data::{prepare, synth_shapes};
use oxidet::loss::LossWeights;
use oxidet::model::{ModelConfig, ModelSize};
use oxidet::train::{evaluate_model, TrainConfig, Trainer, EVAL_CONF};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr0: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(150);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let cls_w: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);

    let mut cfg = ModelConfig::new(ModelSize::NanoDesk, 2);
    cfg.input_size = 160;
    let tcfg = TrainConfig {
        lr0,
        momentum: 0.937,
        weight_decay: 5e-4,
        epochs,
        batch_size: batch,
        seed: 0,
        augment: false,
        warmup_epochs: 3,
        cosine: true,
        eval_every: 5,
        early_stop_map50: Some(0.95),
        out_dir: None,
        loss: LossWeights { cls_w, ..LossWeights::default() },
        ..TrainConfig::default()
    };
    let samples: Vec<_> = synth_shapes(42, 16, 2, 160)
        .unwrap()
        .into_iter()
        .map(|s| (s.image, s.boxes))
        .collect();

    let t0 = Instant::now();
    let mut trainer =
        Trainer::<f32>::new(&cfg, tcfg, &samples, &samples).expect("trainer setup");
    eprintln!("prep done at {:.1}s", t0.elapsed().as_secs_f64());

    let mut log = TimedLines(t0);
    let report = trainer.run(&mut log).expect("training run");
    eprintln!(
        "done: epochs_run={} best_map50={:.4} best_epoch={} wall={:.1}s",
        report.epochs_run,
        report.best_map50,
        report.best_epoch,
        t0.elapsed().as_secs_f64(),
    );

    let rows: Vec<_> = samples
        .iter()
        .map(|(img, boxes)| {
            let (t, gts, _) = prepare::<f32>(img, boxes, 160).unwrap();
            (t.reshape(&[1, 3, 160, 160]).unwrap(), gts)
        })
        .collect();
    let final_report = evaluate_model(&trainer.model, &rows, EVAL_CONF).unwrap();
    eprint!("{}", final_report.to_kv_text());
}

struct TimedLines(Instant);

impl std::io::Write for TimedLines {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let text = String::from_utf8_lossy(buf);
        for line in text.lines() {
            if !line.is_empty() {
                eprintln!("[{:7.1}s] {line}", self.0.elapsed().as_secs_f64());
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
