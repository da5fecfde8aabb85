//! Inference engine: the per-frame loop tying encoder, memory, masks,
//! decoders and lifecycle into a video-to-track-file pipeline.
//!
//! Each frame, every live track submits its whole feature bank as
//! collaborative queries; only the newest query's output becomes the
//! track's prediction, the other rows contribute temporal clues and their
//! final output is discarded. Births and deaths follow the score threshold
//! `sigma` with `n_keep` frames of patience. No non-maximum suppression is
//! applied anywhere.

use crate::autodiff::Tape;
use crate::config::Config;
use crate::decoder::{forward_frame, row_prediction};
use crate::encoder::encode_frame;
use crate::geom::BoundingBox;
use crate::irm::IrmHooks;
use crate::memory::{build_query_batch, update_tracks, TrackRecord};
use crate::nn::{ParamBinding, ParamStore};
use crate::types::{Frame, Prediction};
use crate::{Error, Result};
use ndarray::Array1;
use std::io::{BufRead, Write};
use std::path::Path;

/// One emitted track observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRow {
    pub frame_index: usize,
    pub track_id: u64,
    /// Normalized center-format box.
    pub box_: BoundingBox,
    pub score: f64,
    pub class_id: usize,
}

/// All emitted observations of one video, frame-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackFile {
    pub rows: Vec<TrackRow>,
}

impl TrackFile {
    /// `(frame, id)` pairs must be unique and frames non-decreasing.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut last_frame = 0usize;
        for r in &self.rows {
            if r.frame_index < last_frame {
                return Err(Error::Invalid("frame indices must be non-decreasing".into()));
            }
            last_frame = r.frame_index;
            if !seen.insert((r.frame_index, r.track_id)) {
                return Err(Error::Invalid(format!(
                    "duplicate (frame, id) = ({}, {})",
                    r.frame_index, r.track_id
                )));
            }
        }
        Ok(())
    }

    /// Serialize as MOTChallenge text: `frame,id,x,y,w,h,score,class,-1`
    /// with 1-based frames and pixel top-left coordinates.
    pub fn to_mot_text(&self, img_w: usize, img_h: usize) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let (x1, y1, _, _) = r.box_.corners();
            out.push_str(&format!(
                "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{},-1\n",
                r.frame_index + 1,
                r.track_id,
                x1 * img_w as f64,
                y1 * img_h as f64,
                r.box_.w * img_w as f64,
                r.box_.h * img_h as f64,
                r.score,
                r.class_id
            ));
        }
        out
    }

    pub fn write_mot(&self, path: &Path, img_w: usize, img_h: usize) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_mot_text(img_w, img_h).as_bytes())
            .map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_mot(path: &Path, img_w: usize, img_h: usize) -> Result<TrackFile> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 8 {
                return Err(Error::ParseLine {
                    path: path.into(),
                    line: line_no + 1,
                    msg: format!("expected >= 8 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| Error::ParseLine {
                    path: path.into(),
                    line: line_no + 1,
                    msg: format!("bad number {s:?}"),
                })
            };
            let frame = parse(fields[0])? as usize;
            if frame < 1 {
                return Err(Error::ParseLine {
                    path: path.into(),
                    line: line_no + 1,
                    msg: "frame is 1-based".into(),
                });
            }
            let x = parse(fields[2])? / img_w as f64;
            let y = parse(fields[3])? / img_h as f64;
            let w = parse(fields[4])? / img_w as f64;
            let h = parse(fields[5])? / img_h as f64;
            rows.push(TrackRow {
                frame_index: frame - 1,
                track_id: parse(fields[1])? as u64,
                box_: BoundingBox::from_corners(x, y, x + w, y + h)?,
                score: parse(fields[6])?,
                class_id: parse(fields[7])? as usize,
            });
        }
        Ok(TrackFile { rows })
    }
}

/// Mutable tracking state for one video stream.
pub struct TrackerState<'a> {
    pub config: &'a Config,
    pub params: &'a ParamStore,
    pub tracks: Vec<TrackRecord>,
    next_id: u64,
}

impl<'a> TrackerState<'a> {
    pub fn new(config: &'a Config, params: &'a ParamStore) -> Self {
        TrackerState {
            config,
            params,
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    /// Process one frame: run the decoder stack over the collaborative
    /// queries, update lifecycle state, and emit one row per confirmed
    /// track. Historical rows' final outputs are discarded.
    pub fn step(&mut self, frame: &Frame, frame_index: usize) -> Result<Vec<TrackRow>> {
        let cfg = self.config;
        let mut tape = Tape::new();
        let pb = ParamBinding::bind(&mut tape, self.params);
        let ff = encode_frame(&mut tape, &pb, frame, cfg)?;

        let det_content = tape.value(ff.proposal_content).clone();
        let batch = build_query_batch(
            &self.tracks,
            &det_content,
            &ff.proposal_anchors,
            frame_index,
        );
        let content = tape.leaf(batch.content.clone());
        let outputs = forward_frame(
            &mut tape,
            &pb,
            content,
            &batch.rows,
            &batch.anchors,
            &ff,
            cfg,
            &IrmHooks::default(),
        );
        let last = outputs.last().expect("at least one decoder layer");
        let final_content = tape.value(last.content).clone();

        // Latest-row output per track; all other rows are ignored.
        let mut track_outputs: Vec<(u64, Prediction, Array1<f64>)> = Vec::new();
        let mut row = 0usize;
        for track in &self.tracks {
            let latest_row = row;
            debug_assert!(batch.rows[latest_row].is_latest);
            track_outputs.push((
                track.track_id,
                row_prediction(&tape, last, latest_row),
                final_content.row(latest_row).to_owned(),
            ));
            row += track.bank_len();
        }
        let n_track_rows = row;
        let new_detections: Vec<(Prediction, Array1<f64>)> = (0..cfg.n_det)
            .map(|i| {
                let r = n_track_rows + i;
                (
                    row_prediction(&tape, last, r),
                    final_content.row(r).to_owned(),
                )
            })
            .collect();

        let confirmed: Vec<TrackRow> = track_outputs
            .iter()
            .filter(|(_, pred, _)| pred.score() >= cfg.sigma)
            .map(|(id, pred, _)| {
                let class_id = self
                    .tracks
                    .iter()
                    .find(|t| t.track_id == *id)
                    .map(|t| t.class_id)
                    .expect("track exists");
                TrackRow {
                    frame_index,
                    track_id: *id,
                    box_: pred.box_,
                    score: pred.score(),
                    class_id,
                }
            })
            .collect();

        let outcome = update_tracks(
            &mut self.tracks,
            &track_outputs,
            &new_detections,
            frame_index,
            cfg.sigma,
            cfg.n_keep,
            cfg.n_max,
            &mut self.next_id,
        )?;

        let mut rows = confirmed;
        let firing: Vec<&(Prediction, Array1<f64>)> = new_detections
            .iter()
            .filter(|(p, _)| p.score() >= cfg.sigma)
            .collect();
        debug_assert_eq!(firing.len(), outcome.born.len());
        for (id, (pred, _)) in outcome.born.iter().zip(firing) {
            rows.push(TrackRow {
                frame_index,
                track_id: *id,
                box_: pred.box_,
                score: pred.score(),
                class_id: pred.best_class(),
            });
        }
        rows.sort_by_key(|r| r.track_id);
        Ok(rows)
    }
}

/// Track a whole video. Deterministic given parameters, config and input.
pub fn run(frames: &[Frame], params: &ParamStore, config: &Config) -> Result<TrackFile> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty video".into()));
    }
    let mut state = TrackerState::new(config, params);
    let mut rows = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        rows.extend(state.step(frame, i)?);
    }
    let tf = TrackFile { rows };
    tf.validate()?;
    Ok(tf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SceneSpec;
    use crate::nn::init_model_params;
    use crate::synthgen::{downsample, generate};

    fn test_config() -> Config {
        Config {
            feature_dim: 16,
            d_head: 4,
            n_det: 6,
            num_decoders: 2,
            sigma: 0.3,
            ..Config::default()
        }
    }

    fn video(len: usize, seed: u64) -> Vec<Frame> {
        let spec = SceneSpec {
            video_length: len,
            ..SceneSpec::default()
        };
        generate(&spec, seed).frames
    }

    #[test]
    fn single_frame_video_is_a_detection_pass() {
        let cfg = test_config();
        let params = init_model_params(&cfg, 0);
        let frames = video(1, 0);
        let tf = run(&frames, &params, &cfg).unwrap();
        // Whatever fires must be fresh ids from a pure detector pass.
        for r in &tf.rows {
            assert_eq!(r.frame_index, 0);
            assert!(r.score >= cfg.sigma);
        }
        let mut ids: Vec<u64> = tf.rows.iter().map(|r| r.track_id).collect();
        ids.dedup();
        assert_eq!(ids.len(), tf.rows.len());
    }

    #[test]
    fn run_twice_is_byte_identical() {
        let cfg = test_config();
        let params = init_model_params(&cfg, 1);
        let frames = video(5, 3);
        let a = run(&frames, &params, &cfg).unwrap();
        let b = run(&frames, &params, &cfg).unwrap();
        assert_eq!(a.to_mot_text(64, 64), b.to_mot_text(64, 64));
    }

    #[test]
    fn no_duplicate_frame_id_pairs_and_monotone_ids() {
        let cfg = test_config();
        let params = init_model_params(&cfg, 2);
        let frames = video(8, 5);
        let tf = run(&frames, &params, &cfg).unwrap();
        tf.validate().unwrap();
        // Ids never re-emitted after a gap longer than patience.
        let mut last_seen: std::collections::HashMap<u64, usize> = Default::default();
        for r in &tf.rows {
            if let Some(prev) = last_seen.get(&r.track_id) {
                assert!(r.frame_index - prev <= cfg.n_keep + 1);
            }
            last_seen.insert(r.track_id, r.frame_index);
        }
    }

    #[test]
    fn lost_track_emits_no_row_but_is_retained() {
        let cfg = test_config();
        let params = init_model_params(&cfg, 3);
        let mut state = TrackerState::new(&cfg, &params);
        let frames = video(3, 7);
        state.step(&frames[0], 0).unwrap();
        let live_before = state.tracks.len();
        // Feed a blank frame: scores should mostly collapse; any track
        // whose score drops below sigma must not emit but must survive.
        let blank = Frame::new(64, 64);
        let rows = state.step(&blank, 1).unwrap();
        let emitted: std::collections::HashSet<u64> =
            rows.iter().map(|r| r.track_id).collect();
        for t in &state.tracks {
            if t.lost_age > 0 {
                assert!(!emitted.contains(&t.track_id));
            }
        }
        assert!(state.tracks.len() >= live_before.min(1));
    }

    #[test]
    fn decoder_inputs_scale_with_bank_size_but_outputs_do_not() {
        let cfg = Config {
            n_max: 3,
            ..test_config()
        };
        let params = init_model_params(&cfg, 4);
        let mut state = TrackerState::new(&cfg, &params);
        let frames = video(10, 9);
        let mut steady_checked = false;
        for (i, f) in frames.iter().enumerate() {
            let rows = state.step(f, i).unwrap();
            let per_track_rows: std::collections::HashMap<u64, usize> =
                rows.iter().fold(Default::default(), |mut m, r| {
                    *m.entry(r.track_id).or_insert(0) += 1;
                    m
                });
            for (_, count) in per_track_rows {
                assert_eq!(count, 1, "one output row per track per frame");
            }
            for t in &state.tracks {
                assert!(t.bank_len() <= cfg.n_max);
                if t.bank_len() == cfg.n_max {
                    steady_checked = true;
                }
            }
        }
        assert!(steady_checked, "no track reached steady state");
    }

    #[test]
    fn downsampled_run_has_remapped_indices() {
        let spec = SceneSpec {
            video_length: 9,
            ..SceneSpec::default()
        };
        let item = generate(&spec, 11);
        let down = downsample(&item, 2).unwrap();
        assert_eq!(down.frames.len(), 5);
        let cfg = test_config();
        let params = init_model_params(&cfg, 5);
        let tf = run(&down.frames, &params, &cfg).unwrap();
        for r in &tf.rows {
            assert!(r.frame_index < 5);
        }
    }

    #[test]
    fn mot_text_round_trip() {
        let rows = vec![
            TrackRow {
                frame_index: 0,
                track_id: 1,
                box_: BoundingBox::new(0.5, 0.5, 0.25, 0.25).unwrap(),
                score: 0.87,
                class_id: 1,
            },
            TrackRow {
                frame_index: 1,
                track_id: 1,
                box_: BoundingBox::new(0.52, 0.5, 0.25, 0.25).unwrap(),
                score: 0.91,
                class_id: 1,
            },
        ];
        let tf = TrackFile { rows };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        tf.write_mot(&path, 64, 64).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, "1,1,24.00,24.00,16.00,16.00,0.87,1,-1");
        let back = TrackFile::read_mot(&path, 64, 64).unwrap();
        assert_eq!(back.rows.len(), 2);
        // 2-decimal pixels on a 64-px image: within ~0.01 px.
        for (a, b) in tf.rows.iter().zip(&back.rows) {
            assert!((a.box_.cx - b.box_.cx).abs() * 64.0 < 0.5);
            assert!((a.box_.w - b.box_.w).abs() * 64.0 < 0.5);
            assert_eq!(a.track_id, b.track_id);
            assert_eq!(a.frame_index, b.frame_index);
        }
    }

    #[test]
    fn duplicate_rows_rejected_by_validate() {
        let r = TrackRow {
            frame_index: 0,
            track_id: 1,
            box_: BoundingBox::new(0.5, 0.5, 0.25, 0.25).unwrap(),
            score: 0.9,
            class_id: 1,
        };
        let tf = TrackFile {
            rows: vec![r.clone(), r],
        };
        assert!(tf.validate().is_err());
    }

    #[test]
    fn empty_video_rejected() {
        let cfg = test_config();
        let params = init_model_params(&cfg, 0);
        assert!(run(&[], &params, &cfg).is_err());
    }
}
