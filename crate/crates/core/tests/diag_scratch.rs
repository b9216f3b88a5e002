use ndarray::{Array1, Array2};
use postsel::harness::{CvRandomization, ProcedureId, ScenarioConfig};
use postsel::rng::{RngHub, Substream};
use postsel::{covariance, cv, lasso, law, sampler, stats, Dataset};

#[test]
fn diagnose_fixture_r1() {
    let ds = Dataset::from_csv_path("../cli/tests/fixtures/example.csv").unwrap();
    let mut cfg = ScenarioConfig::preset("fig1", false).unwrap();
    cfg.procedure = ProcedureId::R1;
    cfg.seed = 3;
    cfg.grid_len = 12;
    cfg.cv_randomization = CvRandomization::TwoPart;
    cfg.include_naive = false;
    let hub = RngHub::new(3);
    let n = ds.n() as f64;

    let plan = cv::make_folds(ds.n(), 5, &mut hub.stream(Substream::Folds, 0)).unwrap();
    let grid = cv::lambda_grid(&ds, 12);
    let raw = cv::cv_curve(&ds, &plan, &grid, lasso::Loss::Squared).unwrap();
    let curve = cv::randomize_curve(&raw, cv::RandomizeMode::TwoPart { sigma_r1: 0.1, sigma_r2: 0.1 },
        &mut hub.stream(Substream::Randomization, 0));
    let lambda = curve.grid[curve.winner()];
    println!("lambda_min = {lambda:.3} (index {} of 12), lambda_max = {:.3}", curve.winner(), curve.grid[0]);

    let sd_y = stats::variance(&ds.y().to_vec()).sqrt();
    let sigma_omega = 0.8 * n.sqrt() * sd_y;
    let mut rng = hub.stream(Substream::Randomization, 1);
    let omega = Array1::from_iter((0..ds.p()).map(|_| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        sigma_omega * z
    }));
    let fit = lasso::solve_randomized_lasso(&ds, lambda, 1.0, &omega).unwrap();
    println!("active = {:?}, sigma_omega = {sigma_omega:.2}", fit.active);
    let e = fit.active.len();
    let p = ds.p();

    let table = covariance::influence_contributions(&ds, &fit.active, fit.loss, Some((&curve, &plan))).unwrap();
    let mut brng = hub.stream(Substream::Bootstrap, 0);
    let mut cov = covariance::statistic_cov(&table, 1000, &mut brng).unwrap();
    for li in 0..12 { cov[[e + p + li, e + p + li]] += 0.01; }
    let stat = table.statistic();
    println!("T_obs = {:.4}, sd_T = {:.4}", stat[0], cov[[0,0]].sqrt());

    // scalar law for coordinate 0
    let mut idx = vec![0usize];
    idx.extend(e..e + p);
    let sub = |ix: &[usize]| {
        let mut m = Array1::zeros(ix.len());
        let mut c = Array2::zeros((ix.len(), ix.len()));
        for (a, &ia) in ix.iter().enumerate() {
            m[a] = stat[ia];
            for (b, &ib) in ix.iter().enumerate() { c[[a, b]] = cov[[ia, ib]]; }
        }
        (m, c)
    };
    let (m_i, c_i) = sub(&idx);
    let law_i = law::JointGaussianLaw::new(m_i, c_i, 1).unwrap();
    let t_obs = Array1::from_elem(1, stat[0]);
    let (density, init) = sampler::build_density_randomized_lasso(&fit, &ds, &law_i, &t_obs,
        sigma_omega, sampler::SubgradientMode::Marginalize).unwrap();
    let mut idx_full = vec![0usize];
    idx_full.extend(e..e + p + 12);
    let (m_f, c_f) = sub(&idx_full);
    let law_full = law::JointGaussianLaw::new(m_f, c_f, 1).unwrap();
    let (density_cv, init_cv) = sampler::add_cv_view(&density, &init, &curve, &law_full, &t_obs,
        sampler::CvViewMode::Condition).unwrap();

    // pivot curves with and without the CV view
    let cfg_chain = sampler::ChainConfig { burn_in: 2000, thin: 3, kept: 8000, step_size: None, seed: 1 };
    for (label, d, i0) in [("no-view", &density, &init), ("cv-view", &density_cv, &init_cv)] {
        print!("{label}: F(theta) =");
        for k in 0..9 {
            let theta = stat[0] - 0.4 + 0.1 * k as f64;
            let dd = d.with_theta(Array1::from_elem(1, theta));
            let mut srng = hub.stream(Substream::Sampler, 50 + k as u64);
            let chain = sampler::run_chain(&dd, i0, &cfg_chain, &mut srng).unwrap();
            let col = chain.t_samples().column(0).to_owned();
            let f = col.iter().filter(|v| **v <= stat[0]).count() as f64 / col.len() as f64;
            print!(" {theta:.2}:{f:.3}");
        }
        println!();
    }
}
