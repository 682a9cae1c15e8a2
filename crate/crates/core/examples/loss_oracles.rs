//! Reference values for the SFT and DPO objectives, useful for checking a
//! trainer's loss and gradient computations.

use anyhow::Result;

use treepref::losses::{dpo_gradient, dpo_loss, dpo_with_sft, sft_loss, DpoItem, TokenLogProbs};

fn main() -> Result<()> {
    let chosen = TokenLogProbs::new(vec![-0.1, -0.3, -0.2])?;
    println!("sft loss of {:?}: {:.6}", chosen.values(), sft_loss(&chosen));

    println!("\n{:>8} {:>10} {:>10} {:>10}", "margin", "loss", "d/dw_pol", "d/dl_pol");
    for shift in [-4.0, -1.0, 0.0, 1.0, 4.0, 20.0] {
        // The policy moves `shift` nats toward the chosen response and away from the rejected one.
        let item = DpoItem::new(-5.0 + shift, -5.0, -7.0 - shift, -7.0, 0.1)?;
        let g = dpo_gradient(&item)?;
        println!("{:>8.2} {:>10.6} {:>10.6} {:>10.6}", item.margin(), dpo_loss(&item)?, g.lp_w_policy, g.lp_l_policy);
    }

    let start = DpoItem::new(-5.0, -5.0, -7.0, -7.0, 0.1)?;
    println!("\nat initialization: dpo {:.6} (ln 2 = {:.6})", dpo_loss(&start)?, std::f64::consts::LN_2);
    println!("with sft weight 0.1: {:.6}", dpo_with_sft(&start, &chosen, 0.1)?);
    Ok(())
}
