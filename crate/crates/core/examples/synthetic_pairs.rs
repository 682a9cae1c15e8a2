//! The two preference-pair constructions on start/end story tasks: a
//! refined pair differs only where the constraint is broken, an
//! interfering pair is two independent samples.

use anyhow::Result;

use treepref::seed;
use treepref::synthetic::{build_pair, pair_similarity, random_start_end, verify, PairKind};

fn main() -> Result<()> {
    let spec = random_start_end(&mut seed::rng(4));
    println!("{}\n", spec.instruction());
    for kind in [PairKind::Refined, PairKind::Interfering] {
        let (negative, positive) = build_pair(&spec, kind, &mut seed::rng(5))?;
        println!("== {kind:?} (similarity {:.3})", pair_similarity(&negative, &positive)?.0);
        println!("rejected {:?}: {negative}", verify(&spec, &negative));
        println!("chosen   {:?}: {positive}\n", verify(&spec, &positive));
    }

    let n = 500;
    let mut totals = [0.0; 2];
    for i in 0..n {
        let spec = random_start_end(&mut seed::rng_for(i, "spec"));
        for (slot, kind) in [PairKind::Refined, PairKind::Interfering].into_iter().enumerate() {
            let (a, b) = build_pair(&spec, kind, &mut seed::rng_for(i, &format!("{kind:?}")))?;
            totals[slot] += pair_similarity(&a, &b)?.0;
        }
    }
    println!(
        "mean similarity over {n} tasks: refined {:.3}, interfering {:.3}",
        totals[0] / n as f64,
        totals[1] / n as f64
    );
    Ok(())
}
