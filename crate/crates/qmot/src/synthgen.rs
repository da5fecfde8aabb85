//! Synthetic moving-object videos with ground truth, the frame-rate
//! downsampling harness, dataset archives, and MOTChallenge ingestion.
//!
//! Scenes contain colored rectangles and ellipses bouncing inside the
//! frame with per-frame appearance jitter and optional static occluders.
//! Boundary handling flips the velocity component instead of mirroring the
//! position, so between direction changes every center moves exactly `v`
//! per frame component-wise.

use crate::config::SceneSpec;
use crate::geom::BoundingBox;
use crate::types::{Dataset, Frame, FrameAnnotations, GtEntry, VideoItem};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Read, Write};
use std::path::Path;

const BACKGROUND: [u8; 3] = [24, 26, 30];
const OCCLUDER_COLOR: [u8; 3] = [8, 8, 8];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone)]
struct SceneObject {
    shape: Shape,
    color: [u8; 3],
    // Center position and velocity in pixels.
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Clone, Copy)]
struct Occluder {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn object_mask(obj: &SceneObject, w: f64, h: f64, width: usize, height: usize) -> Vec<(usize, usize)> {
    let x1 = (obj.x - w / 2.0).floor().max(0.0) as usize;
    let x2 = ((obj.x + w / 2.0).ceil() as usize).min(width.saturating_sub(1));
    let y1 = (obj.y - h / 2.0).floor().max(0.0) as usize;
    let y2 = ((obj.y + h / 2.0).ceil() as usize).min(height.saturating_sub(1));
    let mut px = Vec::new();
    for y in y1..=y2.min(height - 1) {
        for x in x1..=x2.min(width - 1) {
            let cx = x as f64 + 0.5;
            let cy = y as f64 + 0.5;
            let inside = match obj.shape {
                Shape::Rect => {
                    (cx - obj.x).abs() <= w / 2.0 && (cy - obj.y).abs() <= h / 2.0
                }
                Shape::Ellipse => {
                    let dx = (cx - obj.x) / (w / 2.0);
                    let dy = (cy - obj.y) / (h / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
            };
            if inside {
                px.push((x, y));
            }
        }
    }
    px
}

/// Build the annotation entry for one rendered object, or `None` when the
/// box has left the frame entirely.
#[allow(clippy::too_many_arguments)]
fn annotate_object(
    track_id: u64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    img_w: f64,
    img_h: f64,
    visible: bool,
) -> Option<GtEntry> {
    let x1 = (cx - w / 2.0).max(0.0);
    let y1 = (cy - h / 2.0).max(0.0);
    let x2 = (cx + w / 2.0).min(img_w);
    let y2 = (cy + h / 2.0).min(img_h);
    if x2 - x1 < 1.0 || y2 - y1 < 1.0 {
        return None;
    }
    let box_ = BoundingBox::from_corners(x1 / img_w, y1 / img_h, x2 / img_w, y2 / img_h).ok()?;
    Some(GtEntry {
        track_id,
        class_id: 1,
        box_,
        visible,
    })
}

/// Generate one annotated video. Pure in the seed: equal seeds give
/// bit-identical frames and annotations.
pub fn generate(spec: &SceneSpec, seed: u64) -> VideoItem {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w_img, h_img) = (spec.width, spec.height);
    let n_objects = rng.gen_range(spec.min_objects..=spec.max_objects);

    let mut objects: Vec<SceneObject> = (0..n_objects)
        .map(|_| {
            let ow = rng.gen_range(spec.min_size..=spec.max_size);
            let oh = rng.gen_range(spec.min_size..=spec.max_size);
            let speed = rng.gen_range(spec.min_velocity..=spec.max_velocity);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            SceneObject {
                shape: if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Ellipse },
                color: [
                    rng.gen_range(90..=255),
                    rng.gen_range(90..=255),
                    rng.gen_range(90..=255),
                ],
                x: rng.gen_range(ow / 2.0..w_img as f64 - ow / 2.0),
                y: rng.gen_range(oh / 2.0..h_img as f64 - oh / 2.0),
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                w: ow,
                h: oh,
            }
        })
        .collect();

    let occluders: Vec<Occluder> = (0..spec.occluder_count)
        .map(|_| Occluder {
            x: rng.gen_range(0.0..w_img as f64),
            y: rng.gen_range(0.0..h_img as f64),
            w: spec.occluder_size,
            h: spec.occluder_size * 1.6,
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.video_length);
    let mut annotations = Vec::with_capacity(spec.video_length);

    for frame_index in 0..spec.video_length {
        if frame_index > 0 {
            for obj in objects.iter_mut() {
                if rng.gen_bool(spec.direction_change_prob) {
                    let speed = (obj.vx * obj.vx + obj.vy * obj.vy).sqrt();
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    obj.vx = speed * angle.cos();
                    obj.vy = speed * angle.sin();
                }
                // Bounce: flip the velocity component instead of mirroring
                // so per-frame displacement magnitude stays exact.
                let half_w = obj.w / 2.0;
                let half_h = obj.h / 2.0;
                if obj.x + obj.vx < half_w || obj.x + obj.vx > w_img as f64 - half_w {
                    obj.vx = -obj.vx;
                }
                if obj.y + obj.vy < half_h || obj.y + obj.vy > h_img as f64 - half_h {
                    obj.vy = -obj.vy;
                }
                obj.x += obj.vx;
                obj.y += obj.vy;
            }
        }

        // Per-frame appearance jitter.
        let rendered: Vec<(f64, f64, [u8; 3])> = objects
            .iter()
            .map(|obj| {
                let sw = obj.w * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter));
                let sh = obj.h * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter));
                let j = spec.color_jitter;
                let color = [
                    (obj.color[0] as f64 + rng.gen_range(-j..=j)).clamp(0.0, 255.0) as u8,
                    (obj.color[1] as f64 + rng.gen_range(-j..=j)).clamp(0.0, 255.0) as u8,
                    (obj.color[2] as f64 + rng.gen_range(-j..=j)).clamp(0.0, 255.0) as u8,
                ];
                (sw, sh, color)
            })
            .collect();

        let mut frame = Frame::new(w_img, h_img);
        for y in 0..h_img {
            for x in 0..w_img {
                frame.put(x, y, BACKGROUND);
            }
        }
        let masks: Vec<Vec<(usize, usize)>> = objects
            .iter()
            .zip(&rendered)
            .map(|(obj, (sw, sh, _))| object_mask(obj, *sw, *sh, w_img, h_img))
            .collect();
        for (i, mask) in masks.iter().enumerate() {
            for &(x, y) in mask {
                frame.put(x, y, rendered[i].2);
            }
        }
        let mut occ_mask = vec![false; w_img * h_img];
        for occ in &occluders {
            let x1 = (occ.x - occ.w / 2.0).max(0.0) as usize;
            let x2 = ((occ.x + occ.w / 2.0) as usize).min(w_img - 1);
            let y1 = (occ.y - occ.h / 2.0).max(0.0) as usize;
            let y2 = ((occ.y + occ.h / 2.0) as usize).min(h_img - 1);
            for y in y1..=y2 {
                for x in x1..=x2 {
                    frame.put(x, y, OCCLUDER_COLOR);
                    occ_mask[y * w_img + x] = true;
                }
            }
        }

        // Visibility: fraction of the object's pixels still its own color
        // (not claimed by a later-drawn object or an occluder).
        let mut covered = vec![false; w_img * h_img];
        let mut entries = Vec::new();
        for i in (0..objects.len()).rev() {
            let mask = &masks[i];
            let total = mask.len().max(1);
            let hidden = mask
                .iter()
                .filter(|&&(x, y)| covered[y * w_img + x] || occ_mask[y * w_img + x])
                .count();
            let vis_fraction = 1.0 - hidden as f64 / total as f64;
            for &(x, y) in mask {
                covered[y * w_img + x] = true;
            }
            let (sw, sh, _) = rendered[i];
            if let Some(e) = annotate_object(
                i as u64 + 1,
                objects[i].x,
                objects[i].y,
                sw,
                sh,
                w_img as f64,
                h_img as f64,
                vis_fraction >= 0.5 && !mask.is_empty(),
            ) {
                entries.push(e);
            }
        }
        entries.sort_by_key(|e| e.track_id);
        frames.push(frame);
        annotations.push(FrameAnnotations {
            frame_index,
            entries,
        });
    }

    VideoItem {
        frames,
        annotations,
    }
}

/// Generate a whole split with per-item seeds derived from `base_seed`.
pub fn generate_split(spec: &SceneSpec, base_seed: u64, count: usize, split: &str) -> Dataset {
    use rayon::prelude::*;
    let items: Vec<VideoItem> = (0..count)
        .into_par_iter()
        .map(|i| generate(spec, base_seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64)))
        .collect();
    Dataset {
        items,
        split: split.to_string(),
    }
}

/// Keep frames `0, n, 2n, ...` and renumber them consecutively.
pub fn downsample(item: &VideoItem, n: usize) -> Result<VideoItem> {
    if n < 1 {
        return Err(Error::Invalid("downsample interval must be >= 1".into()));
    }
    let mut frames = Vec::new();
    let mut annotations = Vec::new();
    for (new_idx, src) in (0..item.frames.len()).step_by(n).enumerate() {
        frames.push(item.frames[src].clone());
        let mut ann = item.annotations[src].clone();
        ann.frame_index = new_idx;
        annotations.push(ann);
    }
    Ok(VideoItem {
        frames,
        annotations,
    })
}

const DATA_MAGIC: &[u8; 8] = b"QMOTDS01";

/// Write a dataset split as one archive of raw frames and annotations.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATA_MAGIC);
    let split = ds.split.as_bytes();
    buf.extend_from_slice(&(split.len() as u32).to_le_bytes());
    buf.extend_from_slice(split);
    buf.extend_from_slice(&(ds.items.len() as u32).to_le_bytes());
    for item in &ds.items {
        buf.extend_from_slice(&(item.frames.len() as u32).to_le_bytes());
        let (w, h) = item
            .frames
            .first()
            .map(|f| (f.width, f.height))
            .unwrap_or((0, 0));
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        for f in &item.frames {
            buf.extend_from_slice(&f.data);
        }
        buf.extend_from_slice(&(item.annotations.len() as u32).to_le_bytes());
        for ann in &item.annotations {
            buf.extend_from_slice(&(ann.frame_index as u32).to_le_bytes());
            buf.extend_from_slice(&(ann.entries.len() as u32).to_le_bytes());
            for e in &ann.entries {
                buf.extend_from_slice(&e.track_id.to_le_bytes());
                buf.extend_from_slice(&(e.class_id as u32).to_le_bytes());
                for v in [e.box_.cx, e.box_.cy, e.box_.w, e.box_.h] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.push(e.visible as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(Error::Invalid("truncated dataset archive".into()));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    if take(&mut pos, 8)? != DATA_MAGIC {
        return Err(Error::Invalid(format!(
            "{} is not a dataset archive",
            path.display()
        )));
    }
    let split_len = read_u32(&mut pos)? as usize;
    let split = String::from_utf8(take(&mut pos, split_len)?.to_vec())
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let n_items = read_u32(&mut pos)? as usize;
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let n_frames = read_u32(&mut pos)? as usize;
        let w = read_u32(&mut pos)? as usize;
        let h = read_u32(&mut pos)? as usize;
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let raw = take(&mut pos, w * h * 3)?;
            frames.push(Frame {
                width: w,
                height: h,
                data: raw.to_vec(),
            });
        }
        let n_ann = read_u32(&mut pos)? as usize;
        let mut annotations = Vec::with_capacity(n_ann);
        for _ in 0..n_ann {
            let frame_index = read_u32(&mut pos)? as usize;
            let n_entries = read_u32(&mut pos)? as usize;
            let mut entries = Vec::with_capacity(n_entries);
            for _ in 0..n_entries {
                let track_id = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                let class_id = read_u32(&mut pos)? as usize;
                let mut vals = [0.0f64; 4];
                for v in vals.iter_mut() {
                    *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                }
                let visible = take(&mut pos, 1)?[0] != 0;
                entries.push(GtEntry {
                    track_id,
                    class_id,
                    box_: BoundingBox::new(vals[0], vals[1], vals[2], vals[3])?,
                    visible,
                });
            }
            annotations.push(FrameAnnotations {
                frame_index,
                entries,
            });
        }
        items.push(VideoItem {
            frames,
            annotations,
        });
    }
    Ok(Dataset { items, split })
}

/// SHA-256 fingerprint of a file, as lowercase hex.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&data);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Resize a frame with bilinear filtering.
pub fn resize_frame(frame: &Frame, w: usize, h: usize) -> Frame {
    if frame.width == w && frame.height == h {
        return frame.clone();
    }
    let img = image::RgbImage::from_raw(
        frame.width as u32,
        frame.height as u32,
        frame.data.clone(),
    )
    .expect("frame buffer is w*h*3");
    let resized = image::imageops::resize(
        &img,
        w as u32,
        h as u32,
        image::imageops::FilterType::Triangle,
    );
    Frame {
        width: w,
        height: h,
        data: resized.into_raw(),
    }
}

/// Load a MOTChallenge-layout sequence: `img1/` frames and `gt/gt.txt`.
/// Boxes are converted to normalized center format using the first image's
/// dimensions; malformed rows are rejected with their line number.
pub fn load_motchallenge(dir: &Path) -> Result<VideoItem> {
    let img_dir = dir.join("img1");
    let gt_path = dir.join("gt").join("gt.txt");
    if !img_dir.is_dir() {
        return Err(Error::Invalid(format!("missing {}", img_dir.display())));
    }
    let mut img_paths: Vec<_> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("jpg") | Some("jpeg") | Some("png")
            )
        })
        .collect();
    img_paths.sort();
    if img_paths.is_empty() {
        return Err(Error::Invalid(format!("no frames in {}", img_dir.display())));
    }

    let mut frames = Vec::with_capacity(img_paths.len());
    for p in &img_paths {
        let img = image::open(p)
            .map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?
            .to_rgb8();
        frames.push(Frame {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
        });
    }
    let (img_w, img_h) = (frames[0].width as f64, frames[0].height as f64);

    let file = std::fs::File::open(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let mut per_frame: Vec<FrameAnnotations> = (0..frames.len())
        .map(|i| FrameAnnotations {
            frame_index: i,
            entries: vec![],
        })
        .collect();

    for (line_no, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&gt_path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::ParseLine {
            path: gt_path.clone(),
            line: line_no + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() < 6 {
            return Err(err(format!("expected >= 6 fields, got {}", fields.len())));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::ParseLine {
                path: gt_path.clone(),
                line: line_no + 1,
                msg: format!("bad {what}: {s:?}"),
            })
        };
        let frame = parse(fields[0], "frame")? as i64;
        let id = parse(fields[1], "id")? as i64;
        let x = parse(fields[2], "x")?;
        let y = parse(fields[3], "y")?;
        let w = parse(fields[4], "w")?;
        let h = parse(fields[5], "h")?;
        if frame < 1 || frame as usize > frames.len() {
            return Err(err(format!("frame {frame} out of range")));
        }
        if id < 0 {
            return Err(err(format!("negative id {id}")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(err(format!("non-positive box extent w={w} h={h}")));
        }
        // MOT gt flag column: 0 marks rows to ignore.
        if let Some(flag) = fields.get(6) {
            if let Ok(f) = flag.parse::<f64>() {
                if f == 0.0 {
                    continue;
                }
            }
        }
        let class_id = fields
            .get(7)
            .and_then(|s| s.parse::<i64>().ok())
            .unwrap_or(1)
            .max(1) as usize;
        let visible = fields
            .get(8)
            .and_then(|s| s.parse::<f64>().ok())
            .map(|v| v >= 0.5)
            .unwrap_or(true);
        let box_ = BoundingBox::from_corners(
            x / img_w,
            y / img_h,
            (x + w) / img_w,
            (y + h) / img_h,
        )?;
        per_frame[frame as usize - 1].entries.push(GtEntry {
            track_id: id as u64,
            class_id,
            box_,
            visible,
        });
    }

    Ok(VideoItem {
        frames,
        annotations: per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn generation_is_pure_in_the_seed() {
        let a = generate(&spec(), 0);
        let b = generate(&spec(), 0);
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data, fb.data);
        }
        for (aa, ab) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(aa.entries, ab.entries);
        }
        let c = generate(&spec(), 1);
        assert_ne!(a.frames[0].data, c.frames[0].data);
    }

    #[test]
    fn zero_velocity_scene_is_static() {
        let s = SceneSpec {
            min_velocity: 0.0,
            max_velocity: 0.0,
            direction_change_prob: 0.0,
            size_jitter: 0.0,
            color_jitter: 0.0,
            video_length: 10,
            ..spec()
        };
        let item = generate(&s, 3);
        for f in &item.frames[1..] {
            assert_eq!(f.data, item.frames[0].data);
        }
        for ann in &item.annotations[1..] {
            assert_eq!(ann.entries, item.annotations[0].entries);
        }
    }

    #[test]
    fn centers_move_exactly_v_per_frame_up_to_reflection() {
        let v = 3.0;
        let s = SceneSpec {
            min_velocity: v,
            max_velocity: v,
            direction_change_prob: 0.0,
            size_jitter: 0.0,
            color_jitter: 0.0,
            occluder_count: 0,
            min_objects: 3,
            max_objects: 3,
            video_length: 40,
            ..spec()
        };
        let item = generate(&s, 11);
        let (w, h) = (s.width as f64, s.height as f64);
        for t in 1..item.annotations.len() {
            for e in &item.annotations[t].entries {
                let prev = item.annotations[t - 1]
                    .entries
                    .iter()
                    .find(|p| p.track_id == e.track_id)
                    .expect("objects never leave");
                let dx = (e.box_.cx - prev.box_.cx) * w;
                let dy = (e.box_.cy - prev.box_.cy) * h;
                // Velocity components keep their magnitude through bounces.
                let speed = (dx * dx + dy * dy).sqrt();
                assert!(
                    (speed - v).abs() < 1e-6,
                    "frame {t} id {}: speed {speed}",
                    e.track_id
                );
            }
        }
    }

    #[test]
    fn downsample_identity_and_index_arithmetic() {
        let s = SceneSpec {
            video_length: 30,
            ..spec()
        };
        let item = generate(&s, 5);
        let same = downsample(&item, 1).unwrap();
        assert_eq!(same.frames.len(), item.frames.len());
        for (a, b) in same.frames.iter().zip(&item.frames) {
            assert_eq!(a.data, b.data);
        }

        let six = downsample(&item, 6).unwrap();
        assert_eq!(six.frames.len(), 5);
        for (k, src) in [0usize, 6, 12, 18, 24].iter().enumerate() {
            assert_eq!(six.frames[k].data, item.frames[*src].data);
            assert_eq!(six.annotations[k].frame_index, k);
            assert_eq!(
                six.annotations[k].entries,
                item.annotations[*src].entries
            );
        }
        assert!(downsample(&item, 0).is_err());
    }

    #[test]
    fn downsample_composes_multiplicatively() {
        let s = SceneSpec {
            video_length: 60,
            ..spec()
        };
        let item = generate(&s, 9);
        let ab = downsample(&downsample(&item, 2).unwrap(), 3).unwrap();
        let direct = downsample(&item, 6).unwrap();
        assert_eq!(ab.frames.len(), direct.frames.len());
        for (a, b) in ab.frames.iter().zip(&direct.frames) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn displacement_scales_linearly_with_interval() {
        let v = 2.0;
        let s = SceneSpec {
            min_velocity: v,
            max_velocity: v,
            direction_change_prob: 0.0,
            size_jitter: 0.0,
            min_objects: 1,
            max_objects: 1,
            occluder_count: 0,
            video_length: 30,
            ..spec()
        };
        let item = generate(&s, 2);
        let n = 4;
        let down = downsample(&item, n).unwrap();
        let (w, h) = (s.width as f64, s.height as f64);
        // Away from bounces, adjacent output frames are n*v apart.
        let mut checked = 0;
        for t in 1..down.annotations.len() {
            let e = &down.annotations[t].entries[0];
            let p = &down.annotations[t - 1].entries[0];
            let dx = (e.box_.cx - p.box_.cx) * w;
            let dy = (e.box_.cy - p.box_.cy) * h;
            let d = (dx * dx + dy * dy).sqrt();
            if d > 0.0 && (d - n as f64 * v).abs() < 1e-6 {
                checked += 1;
            }
        }
        assert!(checked > 0, "no bounce-free gap found");
    }

    #[test]
    fn archive_round_trips() {
        let s = SceneSpec {
            video_length: 4,
            ..spec()
        };
        let ds = generate_split(&s, 7, 2, "val");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("val.bin");
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.split, "val");
        assert_eq!(back.items.len(), 2);
        for (a, b) in ds.items.iter().zip(&back.items) {
            assert_eq!(a.frames.len(), b.frames.len());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert_eq!(fa.data, fb.data);
            }
            for (aa, ab) in a.annotations.iter().zip(&b.annotations) {
                assert_eq!(aa.entries, ab.entries);
            }
        }
    }

    #[test]
    fn annotate_skips_boxes_outside_frame() {
        assert!(annotate_object(1, -20.0, 5.0, 10.0, 10.0, 64.0, 64.0, true).is_none());
        assert!(annotate_object(1, 5.0, 5.0, 10.0, 10.0, 64.0, 64.0, true).is_some());
    }

    fn write_mot_dir(dir: &Path, gt_lines: &str) {
        std::fs::create_dir_all(dir.join("img1")).unwrap();
        std::fs::create_dir_all(dir.join("gt")).unwrap();
        for i in 1..=2 {
            let img = image::RgbImage::from_pixel(64, 48, image::Rgb([10, 20, 30]));
            img.save(dir.join("img1").join(format!("{i:06}.png"))).unwrap();
        }
        std::fs::write(dir.join("gt").join("gt.txt"), gt_lines).unwrap();
    }

    #[test]
    fn motchallenge_crafted_rows_parse() {
        let dir = tempfile::tempdir().unwrap();
        write_mot_dir(dir.path(), "1,3,10,12,16,8,1,1,1.0\n2,3,12,12,16,8,1,1,0.3\n");
        let item = load_motchallenge(dir.path()).unwrap();
        assert_eq!(item.frames.len(), 2);
        assert_eq!(item.annotations[0].entries.len(), 1);
        let e = &item.annotations[0].entries[0];
        assert_eq!(e.track_id, 3);
        assert!(e.visible);
        // x=10 w=16 on a 64-wide image: center (10+8)/64.
        assert!((e.box_.cx - 18.0 / 64.0).abs() < 1e-9);
        assert!((e.box_.w - 16.0 / 64.0).abs() < 1e-9);
        // Second frame's row has visibility 0.3 -> occluded.
        assert!(!item.annotations[1].entries[0].visible);
    }

    #[test]
    fn motchallenge_rejects_bad_rows_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_mot_dir(dir.path(), "1,3,10,12,16,8,1,1,1.0\n2,4,10,12,-5,8,1,1,1.0\n");
        let err = load_motchallenge(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "want line number in {msg}");
        assert!(msg.contains("extent"), "{msg}");
    }

    #[test]
    fn motchallenge_missing_inputs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_motchallenge(dir.path()).is_err());
    }

    #[test]
    fn resize_preserves_size_when_equal() {
        let f = generate(&spec(), 0).frames[0].clone();
        let r = resize_frame(&f, 64, 64);
        assert_eq!(r.data, f.data);
        let r2 = resize_frame(&f, 32, 32);
        assert_eq!((r2.width, r2.height), (32, 32));
    }
}
