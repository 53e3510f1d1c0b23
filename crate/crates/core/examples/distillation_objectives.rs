//! The four training objectives on a toy batch, with their gradients.
//!
//! Student logits, teacher logits and intermediate feature maps are made up
//! here; during training they come from the two networks.

use crossmodal_kd::losses::{
    attention_map, inverse_frequency_weights, total_loss, DistillParams, FeatureMap, HintAdapter,
    LossInputs, Mechanism,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> crossmodal_kd::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let student = [[0.2, 0.1], [-0.4, 0.9], [1.2, -0.3]];
    let teacher = [[-1.0, 2.0], [-0.5, 1.5], [2.0, -1.0]];
    let labels = [1, 1, 0];
    // Two positives and one negative: the negative weighs more.
    let weights = inverse_frequency_weights([1, 2])?;
    println!("class weights {:?}", weights.0);

    let mut feature = |shape: [usize; 4]| {
        let n = shape.iter().product();
        FeatureMap::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let s_tap = feature([3, 4, 4, 4]);
    // Teacher features are wider and finer; they are resized to match.
    let t_tap = feature([3, 8, 8, 8]);
    let adapter = HintAdapter::new(4, 8, &mut ChaCha8Rng::seed_from_u64(5));

    let a = attention_map(s_tap.item(0), 4);
    println!(
        "attention map of item 0 has unit norm: {:.6}",
        a.iter().map(|v| v * v).sum::<f64>()
    );

    for mechanism in Mechanism::ALL {
        let params = DistillParams::with_mechanism(mechanism);
        let loss = total_loss(
            LossInputs {
                student_logits: &student,
                teacher_logits: Some(&teacher),
                labels: &labels,
                student_tap: Some(&s_tap),
                teacher_tap: Some(&t_tap),
            },
            &params,
            weights,
            Some(&adapter),
        )?;
        println!(
            "{:<18} total {:.4}  logit part {:.4}  mechanism part {:.4}  dL/dz[0] {:?}",
            format!("{mechanism:?}"),
            loss.value,
            loss.logit_part,
            loss.mechanism_part,
            loss.d_logits[0].map(|g| (g * 1e4).round() / 1e4)
        );
    }

    // Softening: higher temperature moves the soft targets towards uniform.
    for temperature in [1.0, 2.0, 4.0, 8.0] {
        let params = DistillParams {
            temperature,
            alpha: 1.0,
            ..DistillParams::with_mechanism(Mechanism::LogitKd)
        };
        let loss = total_loss(
            LossInputs {
                student_logits: &student,
                teacher_logits: Some(&teacher),
                labels: &labels,
                student_tap: None,
                teacher_tap: None,
            },
            &params,
            weights,
            None,
        )?;
        println!("T = {temperature}: soft-only objective {:.4}", loss.value);
    }
    Ok(())
}
