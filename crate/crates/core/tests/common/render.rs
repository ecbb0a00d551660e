//! Per-pixel check of rendered reconstructions against their mask plan.

use std::path::Path;

use tvlt::cli::render::PlanRecord;

#[derive(Debug, Default)]
pub struct RenderCheck {
    pub pixels: usize,
    pub mismatches: Vec<String>,
}

fn note(c: &mut RenderCheck, msg: String) {
    if c.mismatches.len() < 10 {
        c.mismatches.push(msg);
    }
}

/// Reads `plan.json` and the images it names from `dir`. A pixel of a masked
/// render must be exactly 0 in every channel when its patch is masked and
/// equal the target pixel otherwise; targets never use 0. Image extents must
/// match the recorded geometry.
pub fn check_render_dir(dir: &Path) -> RenderCheck {
    let record: PlanRecord = serde_json::from_slice(&std::fs::read(dir.join("plan.json")).unwrap()).unwrap();
    let mut c = RenderCheck::default();
    let v = &record.vision;
    let per_frame = (v.height / v.patch) * (v.width / v.patch);
    let masked_v: std::collections::HashSet<usize> = record.plan.vision.masked.iter().copied().collect();
    for f in 0..v.frames {
        let masked = image::open(dir.join(&record.images.vision_masked[f])).unwrap().to_rgb8();
        let target = image::open(dir.join(&record.images.vision_target[f])).unwrap().to_rgb8();
        let recon = image::open(dir.join(&record.images.vision_recon[f])).unwrap().to_rgb8();
        for img in [&masked, &target, &recon] {
            if img.dimensions() != (v.width as u32, v.height as u32) {
                note(&mut c, format!("frame {f}: image is {:?}", img.dimensions()));
                return c;
            }
        }
        for y in 0..v.height {
            for x in 0..v.width {
                let token = f * per_frame + (y / v.patch) * (v.width / v.patch) + x / v.patch;
                let m = masked.get_pixel(x as u32, y as u32).0;
                let t = target.get_pixel(x as u32, y as u32).0;
                c.pixels += 1;
                if t.contains(&0) {
                    note(&mut c, format!("frame {f} target ({x},{y}) uses the masked value"));
                }
                let want = if masked_v.contains(&token) { [0, 0, 0] } else { t };
                if m != want {
                    note(&mut c, format!("frame {f} ({x},{y}) token {token}: {m:?} vs {want:?}"));
                }
            }
        }
    }
    let a = &record.audio;
    let masked_a: std::collections::HashSet<usize> = record.plan.audio.masked.iter().copied().collect();
    let masked = image::open(dir.join(&record.images.audio_masked)).unwrap().to_luma8();
    let target = image::open(dir.join(&record.images.audio_target)).unwrap().to_luma8();
    let recon = image::open(dir.join(&record.images.audio_recon)).unwrap().to_luma8();
    for img in [&masked, &target, &recon] {
        if img.dimensions() != (a.frames as u32, a.mels as u32) {
            note(&mut c, format!("audio image is {:?}", img.dimensions()));
            return c;
        }
    }
    for row in 0..a.mels {
        // the top row is the highest mel bin
        let mel = a.mels - 1 - row;
        for t in 0..a.frames {
            let token = (t / a.patch.time) * (a.mels / a.patch.freq) + mel / a.patch.freq;
            let m = masked.get_pixel(t as u32, row as u32).0[0];
            let tv = target.get_pixel(t as u32, row as u32).0[0];
            c.pixels += 1;
            let want = if masked_a.contains(&token) { 0 } else { tv };
            if tv == 0 || m != want {
                note(&mut c, format!("audio frame {t} mel {mel} token {token}: {m} vs {want}"));
            }
        }
    }
    c
}
