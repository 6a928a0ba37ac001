// Scratch calibration run for the toy recipe (not part of the test suite).

use haplo::checkpoint::teacher_for_config;
use haplo::config::RunConfig;
use haplo::data::synth_dataset;
use haplo::infer::{dump_attention, eval_toy_vqa};
use haplo::model::HaploModel;
use haplo::train::{
    eval_stage1_losses, final_window_mean, retention_check, train_stage1, train_stage2,
};

fn main() {
    let t0 = std::time::Instant::now();
    let mut cfg = RunConfig::toy();
    for arg in std::env::args().skip(1) {
        cfg.apply_override(&arg).unwrap();
    }
    println!("config: {:?}", cfg.stage1);
    println!("config: {:?}", cfg.stage2);
    println!("model: {:?}", cfg.model);

    let ds = synth_dataset(cfg.seed, &cfg.data, cfg.model.vocab).unwrap();
    println!(
        "dataset: {} train / {} heldout ({:.1?})",
        ds.train.len(),
        ds.heldout.len(),
        t0.elapsed()
    );

    let model = HaploModel::<f32>::new(&cfg.model, cfg.seed).unwrap();
    let teacher = teacher_for_config::<f32>(&cfg);

    // ---- stage 1 ----
    let s1 = train_stage1(&model, &teacher, &ds, &cfg, None).unwrap();
    for (i, m) in s1.iter().enumerate() {
        if i % 200 == 0 || i + 1 == s1.len() {
            println!(
                "s1 step {i}: l_v={:.4} l_feat={:.4} l_ctp={:.4} tau={:.4}",
                m.l_v, m.l_feat, m.l_ctp, m.tau
            );
        }
    }
    let (hv, hf) = eval_stage1_losses(&model, &teacher, &ds.heldout[..64.min(ds.heldout.len())], &cfg).unwrap();
    println!("heldout stage1: l_v={hv:.4} l_feat={hf:.4} ({:.1?})", t0.elapsed());
    let ret = retention_check(&model, &teacher, &ds.heldout[..32.min(ds.heldout.len())], &cfg, None).unwrap();
    println!("retention cosine after stage1: {ret:.4}");

    // ---- stage 2 ----
    let mut model = model;
    model.enter_stage2();
    let losses = train_stage2(&model, &ds, &cfg, None).unwrap();
    println!(
        "stage2 final-window mean loss: {:.4} ({:.1?})",
        final_window_mean(&losses),
        t0.elapsed()
    );

    // ---- eval ----
    let report = eval_toy_vqa(&model, &ds, &cfg, false).unwrap();
    println!(
        "heldout accuracy: {:.3} over {} samples",
        report.overall_accuracy, report.n
    );
    for (task, stats) in &report.per_task {
        println!("  {task}: {:.3} ({}/{})", stats.accuracy, stats.correct, stats.n);
    }

    // ---- localization ----
    let cell_px = cfg.model.patch * cfg.data.cell_patches;
    let (mut hits, mut total) = (0, 0);
    let last_pre_layer = cfg.model.depth_pre - 1;
    for s in ds
        .heldout
        .iter()
        .filter(|s| s.task == haplo::data::Task::WhereIs)
    {
        let img = s.render(cell_px, cfg.model.channels);
        let color_word = haplo::data::PALETTE[s.cells[s.target_cell]].0.to_string();
        let q = ds.vocab.decode(&s.question);
        let dump = dump_attention(&model, &ds.vocab, &img, &q, last_pre_layer, &[color_word]).unwrap();
        let row = &dump.rows[0];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        // cell == patch at cell_patches=1
        hits += (best == s.target_cell) as usize;
        total += 1;
    }
    println!(
        "localization argmax-in-cell: {}/{} = {:.3}",
        hits,
        total,
        hits as f64 / total as f64
    );
    println!("total {:.1?}", t0.elapsed());
}
