//! `gradcheck`: finite-difference verification of a family's analytic
//! gradients on a seeded random instance. Nonzero exit if any coordinate
//! exceeds the tolerance.

use deepgp::data::Dataset;
use deepgp::dgp::{initialize_model, DgpArchitecture, DgpObjective, ElboOpts};
use deepgp::exact::ExactGpObjective;
use deepgp::fitc::FitcObjective;
use deepgp::kernels::KernelParams;
use deepgp::opt::{check_gradients, GradCheckReport};
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::Family;
use crate::error::{CliError, CliResult};

pub struct GradcheckArgs {
    pub family: Family,
    pub n: usize,
    pub m: usize,
    pub layers: usize,
    pub dims: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: Option<f64>,
}

pub fn run(args: &GradcheckArgs) -> CliResult<()> {
    let tolerance = args.tolerance.unwrap_or(match args.family {
        Family::Exact | Family::Fitc => 1e-4,
        Family::Svgp | Family::Dgp => 1e-3,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let x = Array2::<f64>::from_shape_fn((args.n, args.dims), |_| rng.random_range(-1.5..1.5));
    let y = Array1::from_shape_fn(args.n, |i| {
        x.row(i).sum().sin() + 0.2 * rng.random_range(-1.0..1.0)
    });

    let report = match args.family {
        Family::Exact => {
            let obj = ExactGpObjective {
                x: &x,
                y: &y,
                ard: false,
            };
            check_gradients(&obj, &[0.1, -0.2, (0.05f64).ln()], args.step)
        }
        Family::Fitc => {
            let z = Array2::<f64>::from_shape_fn((args.m, args.dims), |_| {
                rng.random_range(-1.5..1.5)
            });
            let obj = FitcObjective {
                x: &x,
                y: &y,
                m: args.m,
                ard: false,
            };
            let point =
                FitcObjective::encode(&KernelParams::isotropic(0.0, -0.1), (0.1f64).ln(), &z);
            check_gradients(&obj, &point, args.step)
        }
        Family::Svgp | Family::Dgp => {
            let layers = if args.family == Family::Svgp {
                1
            } else {
                args.layers
            };
            let data = Dataset::from_xy(x.clone(), y.clone())
                .map_err(CliError::from_core)?;
            let arch = DgpArchitecture::uniform(layers, 2, args.m);
            let template =
                initialize_model(&data, &arch, args.seed).map_err(CliError::from_core)?;
            let obj = DgpObjective {
                template: &template,
                x: &x,
                y: &y,
                opts: ElboOpts::new(args.n * 3, 2, args.seed ^ 0xD1CE),
            };
            let mut point = DgpObjective::encode(&template);
            for p in point.iter_mut() {
                *p += 0.05 * rng.random_range(-1.0..1.0);
            }
            check_gradients(&obj, &point, args.step)
        }
    }
    .map_err(CliError::from_core)?;

    print_report(&report, tolerance);
    if report.passes(tolerance) {
        println!(
            "gradcheck {}: PASS (max rel error {:.3e} <= {tolerance:.1e})",
            args.family.name(),
            report.max_rel_error
        );
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradcheck {}: max rel error {:.3e} exceeds {tolerance:.1e}",
            args.family.name(),
            report.max_rel_error
        )))
    }
}

fn print_report(report: &GradCheckReport, tolerance: f64) {
    println!("{} coordinates checked", report.entries.len());
    for e in report.failures(tolerance) {
        println!(
            "  FAIL {}: analytic {:.6e}, finite-difference {:.6e}, rel {:.3e}",
            e.name, e.analytic, e.finite_difference, e.rel_error
        );
    }
}
