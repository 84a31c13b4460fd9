//! Checkpoint round-trip: save freshly initialized parameters for both
//! networks, inspect the file header, and load them back.

use gatn::checkpoint::{checkpoint_info, load_global, load_local, save_global, save_local};
use gatn::config::Config;
use gatn::global::GlobalParams;
use gatn::local::LocalParams;

fn main() {
    let cfg = Config::default().to_text();
    let dir = std::path::PathBuf::from("checkpoint-demo");
    std::fs::create_dir_all(&dir).unwrap();

    let global = GlobalParams::<f32>::init(10, 3, 42);
    let gpath = dir.join("global.gatn");
    save_global(&gpath, &global, &cfg).unwrap();
    let info = checkpoint_info(&gpath).unwrap();
    println!(
        "{}: stage {} elem {:?} version {} with {} tensors",
        gpath.display(),
        info.stage,
        info.elem,
        info.version,
        info.tensors.len()
    );
    for (name, shape) in info.tensors.iter().take(4) {
        println!("  {name}: {shape:?}");
    }
    let (reloaded, _cfg) = load_global::<f32>(&gpath).unwrap();
    assert_eq!(reloaded.num_classes, global.num_classes);
    assert_eq!(reloaded.conv1.weight.data(), global.conv1.weight.data());
    println!("global round-trip ok ({} classes)", reloaded.num_classes);

    let local = LocalParams::<f32>::init(&[32, 64, 24], 3, 42);
    let lpath = dir.join("local.gatn");
    save_local(&lpath, &local, &cfg).unwrap();
    let (reloaded, _cfg) = load_local::<f32>(&lpath).unwrap();
    assert_eq!(reloaded.embed_dim(), local.embed_dim());
    println!("local round-trip ok (embedding dim {})", reloaded.embed_dim());

    // 32-bit checkpoints widen to 64-bit on load; narrowing is rejected
    let widened = load_global::<f64>(&gpath);
    println!(
        "f32 -> f64 widening: {}",
        if widened.is_ok() { "ok" } else { "rejected" }
    );
}
