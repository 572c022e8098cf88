//! Frame-level stream mixing and the mixing-ratio scheduler.

use mixspeech::corpus::FeatureMatrix;
use mixspeech::mixup::{
    mix_streams, scheduler_update, uncertainty, MixConfig, MixState, PhiOrientation, UncertaintyReading,
};
use mixspeech::autodiff::Tensor;

fn main() {
    let audio = FeatureMatrix::new(12, 2, vec![1.0; 24]).unwrap();
    let visual = FeatureMatrix::new(12, 2, vec![-1.0; 24]).unwrap();
    for phi in [0.1, 0.5, 0.9] {
        let (_, mask) = mix_streams(&audio, &visual, phi, 7, PhiOrientation::Audio).unwrap();
        let frames: String = mask.iter().map(|&a| if a { 'A' } else { 'v' }).collect();
        println!("phi {phi:.1}: {frames}");
    }

    let confident = Tensor::matrix(2, 4, vec![0.97, 0.01, 0.01, 0.01, 0.01, 0.97, 0.01, 0.01]);
    let unsure = Tensor::matrix(2, 4, vec![0.25; 8]);
    println!(
        "uncertainty: confident {:.4}, uniform {:.4} (ln 4 = {:.4})",
        uncertainty(&confident).unwrap(),
        uncertainty(&unsure).unwrap(),
        4f64.ln()
    );

    // mixed speech only slightly more confident than visual: the trigger holds
    let mut state = MixState::new(MixConfig::default());
    let reading = UncertaintyReading::new(1.0, 0.97).unwrap();
    for step in 1..=110 {
        let next = scheduler_update(reading, state);
        if next.phi != state.phi {
            println!("step {step:3}: phi {:.4} -> {:.4}", state.phi, next.phi);
        }
        state = next;
    }

    // a clear gap resets the streak
    let before = state.streak;
    state = scheduler_update(UncertaintyReading::new(1.0, 0.5).unwrap(), state);
    println!("streak {before} -> {} after a non-triggering reading", state.streak);
}
