//! Diagnostic: load a checkpoint, run one val video, print score stats.
use qmot::autodiff::Tape;
use qmot::decoder::{forward_frame, row_prediction};
use qmot::encoder::encode_frame;
use qmot::irm::IrmHooks;
use qmot::memory::batch_rows;
use qmot::nn::{load_checkpoint, ParamBinding};
use qmot::synthgen::load_dataset;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (rc, store) = load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let ds = load_dataset(std::path::Path::new(&args[2])).unwrap();
    let item = &ds.items[0];
    for (t, frame) in item.frames.iter().take(6).enumerate() {
        let mut tape = Tape::new();
        let pb = ParamBinding::bind(&mut tape, &store);
        let ff = encode_frame(&mut tape, &pb, frame, &rc.model).unwrap();
        let rows = batch_rows::<ndarray::Array1<f64>>(&[], rc.model.n_det, t);
        let content = ff.proposal_content;
        let outs = forward_frame(&mut tape, &pb, content, &rows, &ff.proposal_anchors, &ff, &rc.model, &IrmHooks::default());
        let last = outs.last().unwrap();
        let mut scores: Vec<f64> = (0..rc.model.n_det)
            .map(|i| row_prediction(&tape, last, i).score())
            .collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let gt_n = item.annotations[t].entries.iter().filter(|e| e.visible).count();
        println!(
            "frame {t}: gt={gt_n} top scores: {:?}",
            &scores[..8.min(scores.len())]
                .iter()
                .map(|s| (s * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
}
