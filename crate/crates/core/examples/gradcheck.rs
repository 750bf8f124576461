//! Compare analytic gradients with finite differences on the tiny config.

use segmoe::model::gradcheck::run_standard;

fn main() -> segmoe::Result<()> {
    let report = run_standard(7)?;
    for b in &report.blocks {
        println!("{:<16} {:>4} params  rel {:.2e}", b.name, b.size, b.max_rel_error);
    }
    println!("theta closed form {:.2e}", report.theta_closed_form_error);
    println!("fusion closed form {:.2e}", report.fuse_closed_form_error);
    println!("passes: {}", report.passes(1e-4, 1e-10));
    Ok(())
}
