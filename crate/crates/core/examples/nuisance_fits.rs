//! Full-sample nuisance fits: instrument projections, price model and the
//! preliminary structural estimate.

use hdblp::dgp::{generate_dataset, DgpConfig};
use hdblp::market::UtilityCache;
use hdblp::nuisance::{fit_full, LambdaMode, NuisanceConfig};
use hdblp::shares::InversionOptions;

fn main() -> hdblp::Result<()> {
    let dgp = DgpConfig {
        markets: 100,
        seed: 11,
        ..Default::default()
    };
    let data = generate_dataset(&dgp)?;
    let record = &data.truth()?.record;
    let quad = dgp.quadrature()?;
    let cache = UtilityCache::new(&data.markets, &quad, InversionOptions::default());

    for mode in [LambdaMode::Theoretical, LambdaMode::Cv] {
        let cfg = NuisanceConfig {
            lambda_mode: mode,
            ..Default::default()
        };
        let fit = fit_full(&cache, &cfg.penalties(), &cfg)?;
        println!("{mode:?} penalties: {:?}", fit.lambdas);
        println!("  sigma~ {:.3}  alpha~ {:.3}  alpha^ {:.3}", fit.sigma_tilde, fit.alpha_tilde, fit.alpha_hat);
        println!("  |beta^ - beta0| = {:.3}", (&fit.beta_hat - record.beta_vector()).norm());
        println!("  |Pi^ - Pi0|     = {:.3}", (&fit.pi_hat - record.pi_matrix()).norm());
    }
    Ok(())
}
