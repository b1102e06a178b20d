// Scratch training probe used during development; driven by env vars.
use beamopt::channel::{derive_seed, make_batch, NormalizationMode, SystemConfig};
use beamopt::trainer::{evaluate, train, CurriculumSchedule, RunConfig, TrainConfig};
use beamopt::transformer::ModelConfig;

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}
fn envu(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let l = envu("L", 8);
    let t = envu("T", 1);
    let q = envu("Q", 2);
    let epochs = envu("EPOCHS", 1200);
    let cross = envu("CROSS", 1) == 1;
    let clip = envf("CLIP", 1.0);
    let lr = envf("LR", 2e-4);
    let t_alpha = envu("T_ALPHA", 500);
    let no_cl = envu("NO_CL", 0) == 1;
    let seed = envu("SEED", 2024) as u64;
    let mut model = ModelConfig::desk(l, t, q);
    model.cross_token_residual = cross;
    let run = RunConfig {
        system: SystemConfig::from_snr(l, l, 1.0, 1.0, envf("SNR", 10.0)),
        model,
        train: TrainConfig {
            lr_start: lr,
            lr_end: envf("LR_END", 5e-5),
            batch_train: 64,
            batch_test: 500,
            t_test: envu("T_TEST", 100),
            total_epochs: epochs,
            seed,
            deterministic: true,
            no_cl,
            no_pga: false,
            end_to_end: envu("E2E", 0) == 1,
            curriculum: CurriculumSchedule { t_alpha, ..CurriculumSchedule::default() },
            window_size: envu("WIN", 3),
            window_t_s: None,
            window_t_e: None,
            epochs_per_state: None,
            normalization: NormalizationMode::StdDev,
            clip_norm: Some(clip),
        },
    };
    let t0 = std::time::Instant::now();
    let outcome = train::<f64>(&run, None).unwrap();
    let test = make_batch::<f64>(&run.system, NormalizationMode::StdDev, derive_seed(777, 9, 0), 500);
    let report = evaluate(&outcome.model, &test).unwrap();
    let trace: Vec<(usize, f64)> = outcome
        .metrics
        .iter()
        .filter_map(|r| r.test_mean_rate.map(|x| (r.epoch, (x * 1e3).round() / 1e3)))
        .collect();
    println!(
        "cfg: T={t} cross={cross} clip={clip} lr={lr} epochs={epochs} no_cl={no_cl} | {:?}",
        t0.elapsed()
    );
    println!(
        "final {:.4}  per-step {:?}",
        report.mean_rate,
        report.per_step_mean.iter().map(|x| (x * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
    println!("trace {:?}", trace);
}
