//! Analytic cases of the symmetric in-batch contrastive loss.
//!
//! cargo run --example contrastive_loss

use gur::objectives::cl_loss;

fn main() -> gur::Result<()> {
    for n in [2, 8, 64] {
        let same = vec![vec![1.0, 0.0, 0.0]; n];
        println!(
            "all embeddings equal, N={n}: loss {:.12} (ln N = {:.12})",
            cl_loss(&same, &same, 0.1)?,
            (n as f64).ln()
        );
    }
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    for tau in [1.0, 0.5, 0.1, 0.05] {
        println!("identity pairs, N=2, tau={tau}: loss {:.6e}", cl_loss(&eye, &eye, tau)?);
    }
    let swapped = vec![eye[1].clone(), eye[0].clone()];
    println!("partners swapped, tau=0.1: loss {:.4}", cl_loss(&eye, &swapped, 0.1)?);
    Ok(())
}
