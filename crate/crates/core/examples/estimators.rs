//! Run every estimator on one simulated dataset, sharing the nuisance work.

use hdblp::dgp::{generate_dataset, DgpConfig};
use hdblp::estimators::{EstimationConfig, EstimationSession, EstimatorKind};

fn main() -> hdblp::Result<()> {
    let dgp = DgpConfig {
        markets: 100,
        seed: 5,
        ..Default::default()
    };
    let data = generate_dataset(&dgp)?;
    let truth = data.truth()?;
    let cfg = EstimationConfig::default();
    let quad = cfg.quadrature()?;
    let session = EstimationSession::new(&data.markets, &quad, &cfg)?;

    println!("truth: sigma = {}, alpha = {}", dgp.sigma, dgp.alpha);
    println!("{:<22}{:>9}{:>9}{:>9}{:>9}", "estimator", "sigma", "se", "alpha", "se");
    for kind in EstimatorKind::ALL {
        match session.run(kind, Some(truth)) {
            Ok(mut rep) => {
                rep.test_against([dgp.sigma, dgp.alpha]);
                let [s, a] = rep.estimate();
                println!("{:<22}{s:>9.3}{:>9.3}{a:>9.3}{:>9.3}", kind.name(), rep.se[0], rep.se[1]);
            }
            Err(e) => println!("{:<22}failed: {e}", kind.name()),
        }
    }
    Ok(())
}
