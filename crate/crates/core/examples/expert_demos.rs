//! Records scripted demonstrations for both tasks, prints dataset statistics
//! and draws the first frame of each camera as ASCII art.
//!
//! ```text
//! cargo run --release --example expert_demos -- [out_dir]
//! ```

use std::path::PathBuf;

use ditblock::envs::{generate_dataset, Mode, Task, IMAGE_SIZE};

const SHADES: &[u8] = b" .:-=+*#%@";

fn ascii(image: &[f32], size: usize) -> String {
    let mut out = String::new();
    for row in (0..size).step_by(2) {
        for col in 0..size {
            let px = &image[(row * size + col) * 3..][..3];
            let lum = (0.3 * px[0] + 0.59 * px[1] + 0.11 * px[2]).clamp(0.0, 1.0);
            out.push(SHADES[((lum * (SHADES.len() - 1) as f32).round()) as usize] as char);
        }
        out.push('\n');
    }
    out
}

fn main() -> ditblock::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    for task in [Task::Fork2d, Task::PickplaceLang] {
        let data = generate_dataset(task, 20, 0)?;
        let lens: Vec<usize> = data.episodes.iter().map(|e| e.len).collect();
        let successes = data.episodes.iter().filter(|e| e.success).count();
        let left = data.episodes.iter().filter(|e| e.mode == Some(Mode::Left)).count();
        println!(
            "{task}: {} episodes, {} steps (min {} max {}), {successes} successful, {left} left detours",
            data.episodes.len(),
            data.steps(),
            lens.iter().min().unwrap(),
            lens.iter().max().unwrap(),
        );
        println!("  action range {:?} .. {:?}", data.stats().action_min, data.stats().action_max);
        let ep = &data.episodes[0];
        let frame = IMAGE_SIZE * IMAGE_SIZE * 3;
        for (c, images) in ep.images.iter().enumerate() {
            println!("  camera {c}, first frame (goal {}):\n{}", ep.goal, ascii(&images[..frame], IMAGE_SIZE));
        }
        if let Some(dir) = &out {
            data.write(dir.join(format!("{task}.bin")))?;
        }
    }
    Ok(())
}
