//! Trains proposed and original stages side by side on the synthetic task.
//!
//! `cargo run --release -p nld-core --example train_direction -- [epochs] [kernel]`

use std::time::Instant;

use nld_core::net::model::{Formulation, NetKernel, Network, NetworkConfig, StageConfig};
use nld_core::net::task::{generate_task, TaskSpec};
use nld_core::net::train::{train, Hyper};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let kernel = match args.get(2).map(String::as_str) {
        Some("rbf") => NetKernel::Rbf { bandwidth: 2.0 },
        Some("embedded") => NetKernel::Embedded {
            dim: 8,
            inner: Box::new(NetKernel::Gaussian),
        },
        _ => NetKernel::Gaussian,
    };
    let spec = TaskSpec {
        num_positions: 16,
        num_channels: 4,
        num_classes: 2,
        num_samples: 512,
        seed: 0,
    };
    let train_set = generate_task::<f64>(&spec).unwrap();
    let val_set = generate_task::<f64>(&TaskSpec { seed: 1, ..spec }).unwrap();
    let hyper = Hyper {
        epochs,
        ..Hyper::default()
    };
    let scale: f64 = std::env::var("SCALE").ok().and_then(|s| s.parse().ok()).unwrap_or(nld_core::net::model::DEFAULT_BLOCK_SCALE);
    let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let hyper = Hyper { lr, ..hyper };
    for (formulation, n) in [
        (Formulation::Proposed, 1),
        (Formulation::Proposed, 2),
        (Formulation::Proposed, 4),
        (Formulation::Proposed, 8),
        (Formulation::Original, 1),
        (Formulation::Original, 4),
    ] {
        let config = NetworkConfig {
            input_channels: 4,
            hidden_channels: 16,
            trunk_blocks: 3,
            block_scale: scale,
            num_classes: 2,
            stages: if n == 0 {
                vec![]
            } else {
                vec![StageConfig {
                    formulation,
                    sub_blocks: n,
                    kernel: kernel.clone(),
                    placement: 1,
                }]
            },
        };
        let net = Network::new(config).unwrap();
        let t = Instant::now();
        let out = train(&net, &train_set, &val_set, &hyper, 0).unwrap();
        let h = &out.history;
        let s = h.final_stats().unwrap();
        if std::env::var("TRACE").is_ok() {
            for (e, st) in h.per_epoch.iter().enumerate() {
                println!("  {e} {:.4} {:.3}", st.train_loss, st.train_acc);
            }
            for w in &h.final_stage_weights {
                for sb in &w.sub_blocks {
                    if let nld_core::net::model::SubBlockWeights::Matrix(m) = sb {
                        println!("  W max_abs {:.3}", m.max_abs());
                    }
                }
            }
        }
        println!(
            "{:>8} N={n}: loss {:.4e} acc {:.3} val {:.3} diverged {} epochs {} ({:.1}s)",
            formulation.as_str(),
            h.final_train_loss(),
            s.train_acc,
            s.val_acc,
            h.diverged,
            h.per_epoch.len(),
            t.elapsed().as_secs_f64()
        );
    }
}
