//! Pixel confusion counts, Dice, precision and recall, and dataset
//! aggregation.
//!
//! Zero denominators follow an [`EmptyPolicy`]. Under the default
//! `Vacuous` policy each 0/0 is 1: an empty prediction is perfectly
//! precise and an empty ground truth is perfectly recalled, and two empty
//! masks agree with Dice 1.

use std::io::Write;

use thiserror::Error;

use crate::ensemble::BinaryMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    Dimensions { pred: (usize, usize), gt: (usize, usize) },
    #[error("cannot aggregate an empty list of scores")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Value of a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyPolicy {
    /// Every 0/0 is 1.
    #[default]
    Vacuous,
    /// Every 0/0 is 0.
    Zero,
}

impl EmptyPolicy {
    fn ratio(self, num: u64, den: u64) -> f64 {
        if den == 0 {
            match self {
                EmptyPolicy::Vacuous => 1.0,
                EmptyPolicy::Zero => 0.0,
            }
        } else {
            num as f64 / den as f64
        }
    }

    pub fn dice(self, c: &ConfusionCounts) -> f64 {
        self.ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
    }

    pub fn precision(self, c: &ConfusionCounts) -> f64 {
        self.ratio(c.tp, c.tp + c.fp)
    }

    pub fn recall(self, c: &ConfusionCounts) -> f64 {
        self.ratio(c.tp, c.tp + c.fn_)
    }
}

impl std::str::FromStr for EmptyPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vacuous" => Ok(EmptyPolicy::Vacuous),
            "zero" => Ok(EmptyPolicy::Zero),
            _ => Err(format!("unknown empty policy `{s}` (expected vacuous or zero)")),
        }
    }
}

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::Dimensions { pred: pred.dims(), gt: gt.dims() });
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2|P ∩ G| / (|P| + |G|)`, computed from the masks as sets.
pub fn dice_set_form(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    dice_set_form_with(pred, gt, EmptyPolicy::default())
}

pub fn dice_set_form_with(pred: &BinaryMask, gt: &BinaryMask, policy: EmptyPolicy) -> Result<f64> {
    check_dims(pred, gt)?;
    let inter = pred.values().iter().zip(gt.values()).filter(|(&p, &g)| p == 1 && g == 1).count() as u64;
    Ok(policy.ratio(2 * inter, (pred.foreground() + gt.foreground()) as u64))
}

/// `2TP / (2TP + FP + FN)`.
pub fn dice_from_counts(c: &ConfusionCounts) -> f64 {
    EmptyPolicy::default().dice(c)
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    EmptyPolicy::default().precision(c)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    EmptyPolicy::default().recall(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

impl ImageScore {
    pub fn from_counts(id: impl Into<String>, counts: ConfusionCounts, policy: EmptyPolicy) -> Self {
        Self {
            id: id.into(),
            dice: policy.dice(&counts),
            precision: policy.precision(&counts),
            recall: policy.recall(&counts),
            counts,
        }
    }
}

pub fn score_image(id: &str, pred: &BinaryMask, gt: &BinaryMask, policy: EmptyPolicy) -> Result<ImageScore> {
    Ok(ImageScore::from_counts(id, confusion(pred, gt)?, policy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub images: usize,
    /// Per-image means.
    pub macro_avg: MetricTriple,
    /// Metrics of the pooled counts.
    pub micro_avg: MetricTriple,
    pub pooled: ConfusionCounts,
}

pub fn aggregate(scores: &[ImageScore], policy: EmptyPolicy) -> Result<Summary> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = scores.len() as f64;
    let mean = |f: fn(&ImageScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let pooled = scores.iter().fold(ConfusionCounts::default(), |acc, s| acc + s.counts);
    Ok(Summary {
        images: scores.len(),
        macro_avg: MetricTriple { dice: mean(|s| s.dice), precision: mean(|s| s.precision), recall: mean(|s| s.recall) },
        micro_avg: MetricTriple {
            dice: policy.dice(&pooled),
            precision: policy.precision(&pooled),
            recall: policy.recall(&pooled),
        },
        pooled,
    })
}

pub const SCORES_CSV_HEADER: &str = "image,dice,precision,recall,tp,fp,fn,tn";

pub fn write_scores_csv(mut w: impl Write, scores: &[ImageScore]) -> std::io::Result<()> {
    writeln!(w, "{SCORES_CSV_HEADER}")?;
    for s in scores {
        let c = &s.counts;
        writeln!(w, "{},{},{},{},{},{},{},{}", s.id, s.dice, s.precision, s.recall, c.tp, c.fp, c.fn_, c.tn)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mask(w: usize, h: usize, v: &[u8]) -> BinaryMask {
        BinaryMask::new(w, h, v.to_vec()).unwrap()
    }

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    // Pixel (r,c) of a 2x2 mask is bit 2r+c.
    fn mask2x2(bits: u8) -> BinaryMask {
        mask(2, 2, &(0..4).map(|i| (bits >> i) & 1).collect::<Vec<_>>())
    }

    #[test]
    fn confusion_examples() {
        let ones = mask(3, 2, &[1; 6]);
        let zeros = mask(3, 2, &[0; 6]);
        assert_eq!(confusion(&ones, &ones).unwrap(), counts(6, 0, 0, 0));
        assert_eq!(confusion(&ones, &zeros).unwrap(), counts(0, 6, 0, 0));
        let pred = mask(2, 2, &[1, 1, 0, 0]);
        let gt = mask(2, 2, &[0, 1, 0, 1]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, counts(1, 1, 1, 1));
        assert_eq!(dice_from_counts(&c), 0.5);
        assert_eq!(dice_set_form(&pred, &gt).unwrap(), 0.5);
        assert!(confusion(&ones, &mask(2, 3, &[1; 6])).is_err());
        assert!(dice_set_form(&ones, &mask(6, 1, &[1; 6])).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(precision(&counts(3, 1, 0, 0)), 0.75);
        assert_eq!(recall(&counts(3, 0, 3, 0)), 0.5);
        let perfect = counts(5, 0, 0, 11);
        assert_eq!((dice_from_counts(&perfect), precision(&perfect), recall(&perfect)), (1.0, 1.0, 1.0));
        let disjoint = confusion(&mask(2, 1, &[1, 0]), &mask(2, 1, &[0, 1])).unwrap();
        assert_eq!(dice_from_counts(&disjoint), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let p = EmptyPolicy::Vacuous;
        let both = counts(0, 0, 0, 4);
        let gt_empty = counts(0, 2, 0, 2);
        let pred_empty = counts(0, 0, 2, 2);
        let triple = |c: &ConfusionCounts| (p.dice(c), p.precision(c), p.recall(c));
        assert_eq!(triple(&both), (1.0, 1.0, 1.0));
        assert_eq!(triple(&gt_empty), (0.0, 0.0, 1.0));
        assert_eq!(triple(&pred_empty), (0.0, 1.0, 0.0));
        let z = EmptyPolicy::Zero;
        assert_eq!((z.dice(&both), z.precision(&pred_empty), z.recall(&gt_empty)), (0.0, 0.0, 0.0));
        assert_eq!("zero".parse::<EmptyPolicy>().unwrap(), EmptyPolicy::Zero);
        assert!("none".parse::<EmptyPolicy>().is_err());
    }

    #[test]
    fn set_form_equals_count_form_on_every_2x2_pair() {
        for policy in [EmptyPolicy::Vacuous, EmptyPolicy::Zero] {
            for a in 0..16u8 {
                for b in 0..16u8 {
                    let (p, g) = (mask2x2(a), mask2x2(b));
                    let c = confusion(&p, &g).unwrap();
                    assert_eq!(c.total(), 4);
                    assert_eq!(dice_set_form_with(&p, &g, policy).unwrap(), policy.dice(&c));
                }
            }
        }
    }

    #[test]
    fn harmonic_mean_identity_and_range() {
        let mut rng = Rng::new(3);
        for _ in 0..500 {
            let mut n = || rng.below(20) as u64;
            let c = counts(n(), n(), n(), n());
            let (d, p, r) = (dice_from_counts(&c), precision(&c), recall(&c));
            for v in [d, p, r] {
                assert!((0.0..=1.0).contains(&v));
            }
            if p + r > 0.0 {
                assert!((d - 2.0 * p * r / (p + r)).abs() <= 1e-12, "{c:?}");
            }
        }
    }

    #[test]
    fn aggregate_macro_and_micro() {
        let p = EmptyPolicy::Vacuous;
        assert_eq!(aggregate(&[], p), Err(MetricsError::Empty));

        let one = ImageScore::from_counts("a", counts(3, 1, 2, 10), p);
        let s = aggregate(std::slice::from_ref(&one), p).unwrap();
        assert_eq!(s.macro_avg, MetricTriple { dice: one.dice, precision: one.precision, recall: one.recall });
        assert_eq!(s.micro_avg, s.macro_avg);

        let good = ImageScore::from_counts("a", counts(4, 0, 0, 0), p);
        let bad = ImageScore::from_counts("b", counts(0, 1, 1, 2), p);
        let s = aggregate(&[good, bad], p).unwrap();
        assert_eq!(s.macro_avg.dice, 0.5);
        assert_eq!(s.micro_avg.dice, 8.0 / 10.0);
    }

    #[test]
    fn scores_csv_layout() {
        let mut out = Vec::new();
        write_scores_csv(&mut out, &[ImageScore::from_counts("img7", counts(1, 1, 1, 1), EmptyPolicy::Vacuous)])
            .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "image,dice,precision,recall,tp,fp,fn,tn\nimg7,0.5,0.5,0.5,1,1,1,1\n");
    }
}
