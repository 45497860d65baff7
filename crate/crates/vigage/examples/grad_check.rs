//! Verifying every backward rule at once: finite-difference the whole
//! model's parameter vector against the tape's analytic gradients.
//!
//!     cargo run --example grad_check

use vigage::dataio::synth_dataset;
use vigage::network::{accumulate_param_grads, forward_pass, init_params, ModelConfig};
use vigage::numerics::{grad_check, DEFAULT_STEP, DEFAULT_TOL};

fn main() -> vigage::Result<()> {
    // The tiny config is small enough to probe every parameter with
    // central differences in well under a minute.
    let cfg = ModelConfig { seed: 1, ..ModelConfig::tiny() };
    let ds = synth_dataset(1, 1, (cfg.image_h, cfg.image_w))?;
    let sample = &ds.samples[0];
    let mut params = init_params(&cfg)?;

    // The probed scalar is the training loss |prediction - age|. The
    // closure must fill the parameter gradient slots when asked; the
    // checker then nudges each scalar by ±h and compares.
    let report = grad_check(
        &mut params,
        |p, with_grad| {
            let mut pass = forward_pass(&sample.image, p, &cfg)?;
            let shifted = pass.tape.add_scalar(pass.prediction, -sample.age)?;
            let loss = pass.tape.abs(shifted)?;
            let value = pass.tape.value(loss)[0];
            if with_grad {
                pass.tape.backward(loss)?;
                accumulate_param_grads(&pass, p, 1.0)?;
            }
            Ok(value)
        },
        DEFAULT_STEP,
    )?;

    println!("checked {} scalar parameters", report.checked);
    println!("max relative error  {:.3e}  (tolerance {:.1e})", report.max_rel_err, DEFAULT_TOL);
    println!(
        "worst parameter     {}  analytic {:.6e}  numeric {:.6e}",
        report.worst_parameter, report.worst_analytic, report.worst_numeric
    );
    report.into_result(DEFAULT_TOL)?;
    println!("\nanalytic gradients agree with central differences");
    Ok(())
}
