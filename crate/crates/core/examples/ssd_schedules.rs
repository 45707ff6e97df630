//! Scheduled sliding-window dropout: the three schedule shapes, sampled per
//! optimiser step.

use hafx::conversion::{ssd_sample, SSDSchedule};
use hafx::tensor::SeededRng;

fn main() -> anyhow::Result<()> {
    let schedules = [
        ("decaying dropout", SSDSchedule { dropout_per_epoch: vec![0.9, 0.75, 0.5], window_per_epoch: vec![64] }),
        ("growing window", SSDSchedule { dropout_per_epoch: vec![0.0], window_per_epoch: vec![4, 8, 16, 32, 64] }),
        (
            "both",
            SSDSchedule {
                dropout_per_epoch: vec![0.9, 0.75, 0.5],
                window_per_epoch: vec![4, 8, 16, 32, 64],
            },
        ),
    ];
    let steps = 2000;
    for (label, s) in &schedules {
        println!("{label}");
        let mut rng = SeededRng::new(0, "ssd");
        for epoch in 1..=6 {
            let mut dropped = 0;
            let mut window = 0;
            for _ in 0..steps {
                let (drop, w) = ssd_sample(s, epoch, &mut rng)?;
                dropped += drop as usize;
                window = w;
            }
            println!(
                "  epoch {epoch}: rate {:.2} window {window:>2} dropped {:.3}",
                s.rate(epoch)?,
                dropped as f64 / steps as f64
            );
        }
    }
    Ok(())
}
