//! Benchmark metrics: box-vs-mask precision/recall/IoU, count accuracy with a confusion
//! matrix, and the CoCoCount prompt set.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::layout::InstanceLayout;
use crate::localize::count_instances;
use crate::relayout::MAX_COUNT;

/// Per-box mask coverage a box must exceed to count as a hit.
pub const BOX_HIT_COVERAGE: f64 = 0.6;

/// Half-open pixel box `[r0, r1) × [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BBox {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Result<Self> {
        if r1 <= r0 || c1 <= c0 {
            return Err(Error::InvalidShape(format!("empty box ({r0},{c0},{r1},{c1})")));
        }
        Ok(Self { r0, c0, r1, c1 })
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }

    /// Tight box of a mask, `None` for an empty mask.
    pub fn of_mask(m: &Mask) -> Option<Self> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..m.h {
            for c in 0..m.w {
                if m.get(r, c) {
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r + 1);
                    c1 = c1.max(c + 1);
                }
            }
        }
        (r1 > 0).then_some(Self { r0, c0, r1, c1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub h: usize,
    pub w: usize,
    pub boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn new(h: usize, w: usize, boxes: Vec<BBox>) -> Result<Self> {
        if let Some(b) = boxes.iter().find(|b| b.r1 > h || b.c1 > w) {
            return Err(Error::InvalidShape(format!("box {b:?} leaves the {h}x{w} grid")));
        }
        Ok(Self { h, w, boxes })
    }

    pub fn union(&self) -> Mask {
        Mask::from_fn(self.h, self.w, |r, c| self.boxes.iter().any(|b| b.contains(r, c)))
    }
}

/// One tight box per nonempty channel, in channel order.
pub fn boxes_from_layout(layout: &InstanceLayout) -> BoxSet {
    BoxSet {
        h: layout.h,
        w: layout.w,
        boxes: layout.channels.iter().filter_map(BBox::of_mask).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: String,
}

/// Parses the external detector format: one `r0 c0 r1 c1 label` per line; blank lines and
/// `#` comments are skipped. Labels may contain spaces.
pub fn parse_box_file(text: &str) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Manifest(format!("box line {}: expected `r0 c0 r1 c1 label`, got {raw:?}", no + 1));
        let mut parts = line.splitn(5, char::is_whitespace);
        let mut num = || -> Result<usize> { parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad) };
        let (r0, c0, r1, c1) = (num()?, num()?, num()?, num()?);
        let label = parts.next().map(str::trim).filter(|s| !s.is_empty()).ok_or_else(bad)?;
        out.push(LabeledBox {
            bbox: BBox::new(r0, c0, r1, c1)?,
            label: label.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    /// False when there were no boxes and precision is reported as 0 by convention.
    pub precision_defined: bool,
}

/// Precision = share of boxes whose mask coverage exceeds 0.6; recall = share of mask
/// pixels inside some box; IoU between the box union and the mask.
pub fn mask_metrics(boxes: &BoxSet, mask: &Mask) -> Result<MaskMetrics> {
    if (boxes.h, boxes.w) != (mask.h, mask.w) {
        return Err(Error::ShapeMismatch("box grid and mask differ".into()));
    }
    let mask_area = mask.area();
    if mask_area == 0 {
        return Err(Error::Precondition("recall is undefined for an empty mask".into()));
    }
    let covered = boxes.union();
    let inter = covered.intersection(mask);
    let union = covered.area() + mask_area - inter;
    let hits = boxes
        .boxes
        .iter()
        .filter(|b| {
            let inside = (b.r0..b.r1)
                .flat_map(|r| (b.c0..b.c1).map(move |c| (r, c)))
                .filter(|&(r, c)| mask.get(r, c))
                .count();
            inside as f64 / b.area() as f64 > BOX_HIT_COVERAGE
        })
        .count();
    let n = boxes.boxes.len();
    Ok(MaskMetrics {
        precision: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        recall: inter as f64 / mask_area as f64,
        iou: inter as f64 / union as f64,
        precision_defined: n > 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOutcome {
    pub target: usize,
    pub detected: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub per_prompt: Vec<PromptOutcome>,
    pub accuracy: f64,
    /// `confusion[t-1][d-1]`: requested t, detected d (detected clamped into [1, 10]).
    pub confusion: [[usize; MAX_COUNT]; MAX_COUNT],
}

impl CountReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let correct = self.per_prompt.iter().filter(|p| p.correct).count();
        let _ = writeln!(s, "prompts {}", self.per_prompt.len());
        let _ = writeln!(s, "correct {correct}");
        let _ = writeln!(s, "accuracy {:.4}", self.accuracy);
        let _ = writeln!(s, "\nconfusion (rows: requested 1..10, columns: detected 1..10)");
        for (t, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:4}")).collect();
            let _ = writeln!(s, "{:3} |{}", t + 1, cells.join(""));
        }
        s
    }
}

/// Tallies how often the detected instance count equals the requested one.
pub fn count_accuracy(reports: &[(usize, InstanceLayout)]) -> Result<CountReport> {
    let mut confusion = [[0usize; MAX_COUNT]; MAX_COUNT];
    let mut per_prompt = Vec::with_capacity(reports.len());
    for (target, layout) in reports {
        if !(1..=MAX_COUNT).contains(target) {
            return Err(Error::Precondition(format!("target {target} outside [1, {MAX_COUNT}]")));
        }
        let detected = count_instances(layout);
        confusion[target - 1][detected.clamp(1, MAX_COUNT) - 1] += 1;
        per_prompt.push(PromptOutcome {
            target: *target,
            detected,
            correct: detected == *target,
        });
    }
    let correct = per_prompt.iter().filter(|p| p.correct).count();
    Ok(CountReport {
        accuracy: if per_prompt.is_empty() { 0.0 } else { correct as f64 / per_prompt.len() as f64 },
        per_prompt,
        confusion,
    })
}

pub const COCOCOUNT_OBJECTS: [&str; 20] = [
    "car",
    "airplane",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "backpack",
    "tie",
    "sports ball",
    "baseball glove",
    "cup",
    "bowl",
    "apple",
    "donut",
    "cell phone",
    "clock",
];
pub const COCOCOUNT_COUNTS: [(usize, &str, usize); 6] =
    [(2, "two", 34), (3, "three", 34), (4, "four", 33), (5, "five", 33), (7, "seven", 33), (10, "ten", 33)];
pub const COCOCOUNT_SCENES: [&str; 3] = ["on the grass", "on the road", "on the ground"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountPrompt {
    pub text: String,
    pub object: &'static str,
    pub count: usize,
    pub scene: Option<&'static str>,
}

pub fn plural(object: &str) -> String {
    match object {
        "sheep" => object.to_string(),
        _ => format!("{object}s"),
    }
}

/// The 200 prompts `a photo of {number} {objects}[ {scene}]`: fixed per-count quotas,
/// random objects, and a scene on exactly half of them.
pub fn cococount_prompts(seed: u64) -> Vec<CountPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<(usize, &str)> = COCOCOUNT_COUNTS
        .iter()
        .flat_map(|&(n, word, quota)| std::iter::repeat_n((n, word), quota))
        .collect();
    slots.shuffle(&mut rng);
    let total = slots.len();
    let mut with_scene = vec![false; total];
    with_scene[..total / 2].iter_mut().for_each(|v| *v = true);
    with_scene.shuffle(&mut rng);
    slots
        .into_iter()
        .zip(with_scene)
        .map(|((count, word), scened)| {
            let object = COCOCOUNT_OBJECTS[rng.random_range(0..COCOCOUNT_OBJECTS.len())];
            let scene = scened.then(|| COCOCOUNT_SCENES[rng.random_range(0..COCOCOUNT_SCENES.len())]);
            let mut text = format!("a photo of {word} {}", plural(object));
            if let Some(s) = scene {
                text.push(' ');
                text.push_str(s);
            }
            CountPrompt {
                text,
                object,
                count,
                scene,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> Mask {
        Mask::from_fn(h, w, |r, c| r >= r0 && r < r1 && c >= c0 && c < c1)
    }

    #[test]
    fn tight_boxes() {
        let sq = rect(8, 8, 3, 3, 5, 5);
        let l = InstanceLayout::new(8, 8, vec![sq]).unwrap();
        assert_eq!(boxes_from_layout(&l).boxes, vec![BBox::new(3, 3, 5, 5).unwrap()]);
        assert!(boxes_from_layout(&InstanceLayout::empty(8, 8)).boxes.is_empty());
    }

    #[test]
    fn metric_fixtures() {
        // boxes tiling the mask
        let mask = rect(8, 8, 1, 1, 5, 7);
        let tiles = BoxSet::new(8, 8, vec![BBox::new(1, 1, 5, 4).unwrap(), BBox::new(1, 4, 5, 7).unwrap()]).unwrap();
        let m = mask_metrics(&tiles, &mask).unwrap();
        assert_eq!((m.precision, m.recall, m.iou), (1.0, 1.0, 1.0));
        // one box entirely outside
        let out = BoxSet::new(8, 8, vec![BBox::new(6, 0, 8, 2).unwrap()]).unwrap();
        let m = mask_metrics(&out, &mask).unwrap();
        assert_eq!((m.precision, m.iou), (0.0, 0.0));
        // 10-px box with 7 px on a 20-px mask
        let mask = Mask::from_fn(10, 10, |r, c| (r == 0 && c < 7) || (r >= 5 && r < 8 && c >= 5 && c < 9) || (r == 9 && c == 0));
        assert_eq!(mask.area(), 20);
        let b = BoxSet::new(10, 10, vec![BBox::new(0, 0, 1, 10).unwrap()]).unwrap();
        let m = mask_metrics(&b, &mask).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 7.0 / 20.0);
        assert_eq!(m.iou, 7.0 / (10.0 + 20.0 - 7.0));
    }

    #[test]
    fn metric_edge_cases() {
        let empty = BoxSet::new(4, 4, vec![]).unwrap();
        let m = mask_metrics(&empty, &rect(4, 4, 0, 0, 2, 2)).unwrap();
        assert!(!m.precision_defined);
        assert_eq!(m.precision, 0.0);
        assert!(mask_metrics(&empty, &Mask::zeros(4, 4)).is_err());
        assert!(BoxSet::new(4, 4, vec![BBox::new(0, 0, 5, 1).unwrap()]).is_err());
        assert!(BBox::new(2, 2, 2, 3).is_err());
    }

    #[test]
    fn box_file() {
        let boxes = parse_box_file("# detector output\n1 2 5 6 cat\n\n0 0 3 3 sports ball # ok\n").unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[1].label, "sports ball");
        assert_eq!(boxes[0].bbox, BBox::new(1, 2, 5, 6).unwrap());
        assert!(parse_box_file("1 2 5 cat").is_err());
        assert!(parse_box_file("1 2 5 6").is_err());
        assert!(parse_box_file("5 2 1 6 cat").is_err());
    }

    #[test]
    fn count_tally() {
        let mk = |n: usize| {
            InstanceLayout::new(8, 8, (0..n).map(|i| rect(8, 8, i, 0, i + 1, 1)).collect()).unwrap()
        };
        let r = count_accuracy(&[(2, mk(2)), (3, mk(3)), (4, mk(5))]).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion[1][1], 1);
        assert_eq!(r.confusion[2][2], 1);
        assert_eq!(r.confusion[3][4], 1);
        let diag: usize = (0..10).map(|i| r.confusion[i][i]).sum();
        assert_eq!(diag, 2);
        assert!(count_accuracy(&[(11, mk(1))]).is_err());
        assert!(r.render().contains("accuracy 0.6667"));
    }

    #[test]
    fn prompts_histogram_and_scenes() {
        let p = cococount_prompts(0);
        assert_eq!(p.len(), 200);
        for &(n, word, quota) in &COCOCOUNT_COUNTS {
            assert_eq!(p.iter().filter(|x| x.count == n).count(), quota);
            assert!(p.iter().filter(|x| x.count == n).all(|x| x.text.starts_with(&format!("a photo of {word} "))));
        }
        assert_eq!(p.iter().filter(|x| x.scene.is_some()).count(), 100);
        assert!(p.iter().all(|x| COCOCOUNT_OBJECTS.contains(&x.object)));
        assert_eq!(cococount_prompts(0), p);
        assert_ne!(cococount_prompts(1), p);
    }
}
