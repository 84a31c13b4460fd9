//! Entropy-gradient attention: train a small global classifier on a
//! synthetic gallery, compute the saliency map of one image with a single
//! backward pass, and render the patch overlay.

use gatn::data::synth::{synth_generate, SynthConfig};
use gatn::global::{analyze, train_global, GlobalTrainConfig};
use gatn::viz::render_attention_overlay;

fn main() {
    let out = std::path::PathBuf::from("attention-demo");
    let (dataset, _boxes) = synth_generate::<f32>(&SynthConfig {
        ids: 8,
        images_per_id: 4,
        cameras: 2,
        seed: 7,
        out_dir: out.clone(),
    })
    .unwrap();

    let (mut params, report) = train_global(
        &dataset,
        &GlobalTrainConfig {
            epochs: 60,
            seed: 7,
            target_accuracy: 0.95,
            ..Default::default()
        },
    )
    .unwrap();
    println!(
        "trained {} classes to {:.1}% accuracy in {} epochs",
        report.num_classes,
        100.0 * report.final_accuracy,
        report.epoch_losses.len()
    );

    let sample = &dataset.samples[0];
    let art = analyze(&sample.pixels, &mut params, 8).unwrap();
    println!("image: {}", sample.path.display());
    println!("predicted class: {}  entropy: {:.4}", art.distribution.argmax(), art.entropy);
    println!("backward passes used for the map: {}", art.backward_runs);
    println!("attention grid ({}x{}):", art.map.rows(), art.map.cols());
    for i in 0..art.map.rows() {
        let row: Vec<String> = (0..art.map.cols())
            .map(|j| format!("{:6.3}", art.map.values.data()[i * art.map.cols() + j]))
            .collect();
        println!("  {}", row.join(" "));
    }
    println!("selected patch cells: {:?}", art.patches.positions);

    let overlay = out.join("overlay.ppm");
    render_attention_overlay(&sample.pixels, &art.map, &art.patches, &overlay).unwrap();
    println!("overlay written to {}", overlay.display());
}
