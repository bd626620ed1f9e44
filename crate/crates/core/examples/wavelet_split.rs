//! Two-level Haar analysis of an image: band energies, Parseval and the
//! round trip.
//!
//! `cargo run --release --example wavelet_split`

use lensless::experiment::toy_scene;
use lensless::wavelet::{dwt2_multi, idwt_multi};
use lensless::SimRng;

fn main() -> lensless::Result<()> {
    let x = toy_scene(&mut SimRng::new(4), 64);
    let p = dwt2_multi(&x, 2)?;
    for lvl in &p.levels {
        let e = |t: &lensless::Tensor| t.norm().powi(2);
        println!(
            "level {}: {:?}  LH {:.3}  HL {:.3}  HH {:.3}",
            lvl.level,
            lvl.lh.shape(),
            e(&lvl.lh),
            e(&lvl.hl),
            e(&lvl.hh)
        );
    }
    println!("LL {:?}, mean {:.4} (image mean x 4 per level)", p.ll().shape(), p.ll().mean());
    println!("energy image {:.6} vs pyramid {:.6}", x.norm().powi(2), p.energy());
    let back = idwt_multi(&p)?;
    println!("round-trip max error {:.3e}", back.max_abs_diff(&x)?);
    Ok(())
}
