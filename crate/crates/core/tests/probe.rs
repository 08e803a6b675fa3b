use fast_core::config::TrainConfig;
use fast_core::corpus::read_jsonl;
use fast_core::model::train_offline;
use std::path::Path;

#[test]
#[ignore]
fn probe_seed13_clip15() {
    let train = read_jsonl(Path::new("/root/pilots/W/train.jsonl")).unwrap();
    let dev = read_jsonl(Path::new("/root/pilots/W/dev.jsonl")).unwrap();
    let tcfg = TrainConfig { clip_norm: 15.0, ..TrainConfig::default() };
    let dir = Path::new("/root/pilots/D13");
    std::fs::create_dir_all(dir).unwrap();
    let t0 = std::time::Instant::now();
    let (_m, _ps, summary) = train_offline(
        &fast_core::config::ModelConfig::default(),
        &tcfg,
        &train,
        &dev,
        13,
        dir,
        None,
        &mut |_| {},
    )
    .unwrap();
    println!(
        "clip15 seed13: dev_s1={:.4} dev_s2={:.4} wall={:.1}s",
        summary.dev_st_after_stage1,
        summary.dev_st_after_stage2,
        t0.elapsed().as_secs_f64()
    );
    fast_core::ckpt::save(&dir.join("teacher.fastckpt"), &summary.averaged).unwrap();
}
