//! Parameter sweep through the library API on a worker pool.

use lmrate::cli::{sweep_rows, RunConfig};
use lmrate::{nats_to_bits, Scheme};

fn main() {
    let cfg = RunConfig {
        modulation: vec![Scheme::Qpsk, Scheme::Qam16],
        eta: vec![0.8, 0.9],
        snr_db: vec![-5.0, 0.0, 5.0, 10.0],
        n_side: vec![30],
        workers: 4,
        ..RunConfig::default()
    };
    cfg.validate().unwrap();
    let mut solver = cfg.clone();
    solver.solver.accelerate = true;
    for r in sweep_rows(&solver).unwrap() {
        println!(
            "{:>6} eta {:.1} {:>5} dB  LM {:.6}  GMI {:.6}  iters {:4}  status {}",
            r.cell.modulation.name(),
            r.cell.eta,
            r.cell.snr_db,
            nats_to_bits(r.lm_rate_nats),
            nats_to_bits(r.gmi_nats),
            r.iterations,
            r.status
        );
    }
}
