//! Preset constellations, their invariants, and validation of a custom one.

use lmrate::{Constellation, Scheme, ValidationOptions};

fn main() {
    for s in Scheme::ALL {
        let c = Constellation::build(s);
        println!(
            "{:>7}: {:3} points, power {:.6}, entropy {:.4} nats, centrally symmetric: {}",
            s.name(),
            c.len(),
            c.power(),
            c.entropy(),
            c.is_centrally_symmetric()
        );
    }

    // An off-center alphabet with the wrong power: every violation is reported.
    let pts = vec![[1.0, 0.0], [0.0, 1.0], [-0.5, -0.5]];
    let probs = vec![0.5, 0.25, 0.25];
    match Constellation::custom(pts, probs, ValidationOptions::default()) {
        Ok(_) => println!("accepted"),
        Err(e) => println!("rejected: {e}"),
    }
}
