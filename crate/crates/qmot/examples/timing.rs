use qmot::config::*;
use qmot::nn::init_model_params;
use qmot::synthgen::generate;
use qmot::trainer::clip_loss_grads;
use qmot::types::{Frame, FrameAnnotations};
use std::time::Instant;

fn main() {
    let rc = RunConfig::default();
    let store = init_model_params(&rc.model, 0);
    println!("params: {}", store.num_scalars());
    let item = generate(&rc.scene, 1);
    let frames: Vec<&Frame> = item.frames[..4].iter().collect();
    let anns: Vec<&FrameAnnotations> = item.annotations[..4].iter().collect();
    // warmup
    let _ = clip_loss_grads(&store, &frames, &anns, &rc).unwrap();
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let _ = clip_loss_grads(&store, &frames, &anns, &rc).unwrap();
    }
    println!("clip fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t1 = Instant::now();
    let mut state_frames = 0;
    let params = &store;
    for _ in 0..3 {
        let tf = qmot::tracker::run(&item.frames, params, &rc.model).unwrap();
        state_frames += item.frames.len();
        let _ = tf;
    }
    println!("inference: {:.2} ms/frame", t1.elapsed().as_secs_f64() * 1000.0 / state_frames as f64);
}
