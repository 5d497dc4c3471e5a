//! Teacher update rules.
//!
//! Three rules derive a teacher from its student:
//!
//! * **TMA** (temporal moving average): every scalar moves to
//!   `m * teacher + (1 - m) * student`.
//! * **SE** (spatial ensemble): each slot is kept with probability `p` and
//!   otherwise overwritten by the student's slot.
//! * **STS** (spatial-temporal smoothing): each slot is kept with probability
//!   `p` and otherwise receives a TMA step with momentum `m`.
//!
//! STS with `m = 0` is SE, and STS with `p = 0` is TMA. Both identities hold
//! bitwise here because all three rules share the same per-scalar kernel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_store::{Granularity, ParamStore, SlotRef, UnitKind};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Tma,
    Se,
    Sts,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Tma => "tma",
            Method::Se => "se",
            Method::Sts => "sts",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "tma" => Ok(Method::Tma),
            "se" => Ok(Method::Se),
            "sts" => Ok(Method::Sts),
            other => Err(Error::config("smoothing.method", format!("unknown method `{other}`"))),
        }
    }
}

/// Which rule to apply and with what hyperparameters.
///
/// `p` is the preserving probability (chance a slot keeps its teacher value),
/// `m` the momentum used where a slot is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub method: Method,
    pub p: f64,
    pub m: f64,
    pub granularity: Granularity,
    pub seed: u64,
    pub include_buffers: bool,
}

impl SmoothingConfig {
    pub fn new(method: Method, p: f64, m: f64) -> Self {
        Self {
            method,
            p,
            m,
            granularity: Granularity::LayerWise,
            seed: 0,
            include_buffers: true,
        }
    }

    pub fn none() -> Self {
        Self::new(Method::None, 0.0, 0.0)
    }

    pub fn tma(m: f64) -> Self {
        Self::new(Method::Tma, 0.0, m)
    }

    pub fn se(p: f64) -> Self {
        Self::new(Method::Se, p, 0.0)
    }

    pub fn sts(p: f64, m: f64) -> Self {
        Self::new(Method::Sts, p, m)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("smoothing.p", self.p)?;
        check_probability("smoothing.m", self.m)
    }
}

/// Monotone teacher update counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StepIndex(pub u64);

impl StepIndex {
    pub fn next(self) -> Self {
        StepIndex(self.0 + 1)
    }
}

/// One Bernoulli draw per slot. `true` keeps the teacher slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSample {
    pub flags: Vec<bool>,
    pub seed_used: u64,
    pub draw_index: u64,
}

impl MaskSample {
    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn preserved_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn preserved_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 0.0;
        }
        self.preserved_count() as f64 / self.flags.len() as f64
    }

    /// Flags packed most-significant-bit first, four per hex digit.
    pub fn to_hex(&self) -> String {
        self.flags
            .chunks(4)
            .map(|chunk| {
                let nibble = chunk
                    .iter()
                    .enumerate()
                    .fold(0u32, |acc, (i, &f)| acc | ((f as u32) << (3 - i)));
                char::from_digit(nibble, 16).expect("nibble < 16")
            })
            .collect()
    }
}

fn check_probability(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} is outside [0, 1]")))
    }
}

/// Draws `slot_count` independent Bernoulli(`p`) flags.
///
/// The draw is a pure function of `(slot_count, p, seed, draw_index)`.
pub fn sample_mask(slot_count: usize, p: f64, seed: u64, draw_index: u64) -> Result<MaskSample> {
    check_probability("smoothing.p", p)?;
    if slot_count == 0 {
        return Err(Error::Mask("cannot draw a mask over zero slots".into()));
    }
    let mut rng = rng::stream(seed, Domain::Mask, draw_index);
    let flags = (0..slot_count)
        .map(|_| rng.random::<f64>() < p)
        .collect();
    Ok(MaskSample {
        flags,
        seed_used: seed,
        draw_index,
    })
}

#[inline]
fn blend(teacher: f64, student: f64, m: f64) -> f64 {
    if m == 0.0 {
        student
    } else if m == 1.0 {
        teacher
    } else {
        m * teacher + (1.0 - m) * student
    }
}

fn blend_slot(teacher: &mut ParamStore, student: &ParamStore, slot: &SlotRef, m: f64) {
    let src = &student.units()[slot.unit].data;
    let dst = &mut teacher.units_mut()[slot.unit].data;
    for i in slot.indices.iter() {
        dst[i] = blend(dst[i], src[i], m);
    }
}

/// `teacher <- m * teacher + (1 - m) * student` on every scalar.
pub fn apply_tma(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    apply_tma_where(teacher, student, m, |_| true)
}

fn apply_tma_where(
    teacher: &mut ParamStore,
    student: &ParamStore,
    m: f64,
    keep: impl Fn(UnitKind) -> bool,
) -> Result<()> {
    check_probability("smoothing.m", m)?;
    teacher.check_congruent(student)?;
    for (dst, src) in teacher.units_mut().iter_mut().zip(student.units()) {
        if !keep(dst.kind) {
            continue;
        }
        for (t, &s) in dst.data.iter_mut().zip(&src.data) {
            *t = blend(*t, s, m);
        }
    }
    Ok(())
}

/// Replaces every slot whose flag is `false` by the student's values.
pub fn apply_se(
    teacher: &mut ParamStore,
    student: &ParamStore,
    mask: &MaskSample,
    slots: &[SlotRef],
) -> Result<()> {
    apply_sts(teacher, student, mask, slots, 0.0)
}

/// Applies a TMA step with momentum `m` to every slot whose flag is `false`.
pub fn apply_sts(
    teacher: &mut ParamStore,
    student: &ParamStore,
    mask: &MaskSample,
    slots: &[SlotRef],
    m: f64,
) -> Result<()> {
    check_probability("smoothing.m", m)?;
    teacher.check_congruent(student)?;
    if mask.len() != slots.len() {
        return Err(Error::Mask(format!(
            "mask has {} flags but there are {} slots",
            mask.len(),
            slots.len()
        )));
    }
    for (&preserve, slot) in mask.flags.iter().zip(slots) {
        if !preserve {
            blend_slot(teacher, student, slot, m);
        }
    }
    Ok(())
}

/// One teacher update as dictated by `cfg`.
///
/// SE and STS draw a fresh mask at `draw_index = step` and return it; None and
/// TMA return `None`. Buffer units are left alone when
/// `cfg.include_buffers` is false.
pub fn smooth_step(
    cfg: &SmoothingConfig,
    teacher: &mut ParamStore,
    student: &ParamStore,
    step: StepIndex,
) -> Result<Option<MaskSample>> {
    cfg.validate()?;
    teacher.check_congruent(student)?;
    let eligible = |kind: UnitKind| cfg.include_buffers || kind != UnitKind::Buffer;
    match cfg.method {
        Method::None => Ok(None),
        Method::Tma => {
            apply_tma_where(teacher, student, cfg.m, eligible)?;
            Ok(None)
        }
        Method::Se | Method::Sts => {
            let slots = teacher.enumerate_slots_where(cfg.granularity, |u| eligible(u.kind));
            if slots.is_empty() {
                return Ok(None);
            }
            let mask = sample_mask(slots.len(), cfg.p, cfg.seed, step.0)?;
            let m = if cfg.method == Method::Se { 0.0 } else { cfg.m };
            apply_sts(teacher, student, &mask, &slots, m)?;
            Ok(Some(mask))
        }
    }
}

/// Momentum of the TMA step that one STS step equals in expectation:
/// `p + (1 - p) * m`.
pub fn effective_momentum(p: f64, m: f64) -> Result<f64> {
    check_probability("smoothing.p", p)?;
    check_probability("smoothing.m", m)?;
    Ok(p + (1.0 - p) * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_store::{InitRule, Unit, UnitSpec};

    fn scalar(v: f64) -> ParamStore {
        ParamStore::from_units(vec![Unit {
            name: "x".into(),
            shape: vec![1],
            kind: UnitKind::Weight,
            data: vec![v],
        }])
        .unwrap()
    }

    fn pair() -> (ParamStore, ParamStore) {
        let spec = [
            UnitSpec::new("w", &[3, 4], UnitKind::Weight),
            UnitSpec::new("b", &[4], UnitKind::Bias),
            UnitSpec::new("stat", &[4], UnitKind::Buffer),
        ];
        let mut t = ParamStore::new(&spec, InitRule::Uniform { bound: 1.0 }, 1).unwrap();
        let mut s = ParamStore::new(&spec, InitRule::Uniform { bound: 1.0 }, 2).unwrap();
        for (k, v) in t.units_mut()[1].data.iter_mut().enumerate() {
            *v = k as f64;
        }
        for (k, v) in s.units_mut()[2].data.iter_mut().enumerate() {
            *v = -(k as f64) - 1.0;
        }
        (t, s)
    }

    fn bits(s: &ParamStore) -> Vec<u64> {
        s.flat().map(f64::to_bits).collect()
    }

    #[test]
    fn degenerate_masks() {
        assert!(sample_mask(50, 1.0, 3, 0).unwrap().flags.iter().all(|&f| f));
        assert!(sample_mask(50, 0.0, 3, 0).unwrap().flags.iter().all(|&f| !f));
    }

    #[test]
    fn mask_rejects_bad_probability() {
        assert!(matches!(sample_mask(4, 1.5, 0, 0), Err(Error::Config { .. })));
        assert!(matches!(sample_mask(4, -0.1, 0, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn mask_hex_encoding() {
        let m = MaskSample {
            flags: vec![true, false, true, true, false, true],
            seed_used: 0,
            draw_index: 0,
        };
        assert_eq!(m.to_hex(), "b4");
    }

    #[test]
    fn tma_arithmetic() {
        let mut t = scalar(2.0);
        apply_tma(&mut t, &scalar(1.0), 0.9).unwrap();
        assert!((t.units()[0].data[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn tma_extremes() {
        let (t0, s) = pair();
        let mut t = t0.clone();
        apply_tma(&mut t, &s, 1.0).unwrap();
        assert_eq!(bits(&t), bits(&t0));
        apply_tma(&mut t, &s, 0.0).unwrap();
        assert_eq!(bits(&t), bits(&s));
    }

    #[test]
    fn tma_zero_momentum_copies_negative_zero() {
        let mut t = scalar(2.0);
        apply_tma(&mut t, &scalar(-0.0), 0.0).unwrap();
        assert_eq!(t.units()[0].data[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn se_layer_wise_flags() {
        let spec = [
            UnitSpec::new("a", &[2], UnitKind::Weight),
            UnitSpec::new("b", &[2], UnitKind::Weight),
        ];
        let t0 = ParamStore::new(&spec, InitRule::Uniform { bound: 1.0 }, 1).unwrap();
        let s = ParamStore::new(&spec, InitRule::Uniform { bound: 1.0 }, 2).unwrap();
        let slots = t0.enumerate_slots(Granularity::LayerWise);
        let mask = MaskSample {
            flags: vec![true, false],
            seed_used: 0,
            draw_index: 0,
        };
        let mut t = t0.clone();
        apply_se(&mut t, &s, &mask, &slots).unwrap();
        assert_eq!(t.units()[0].data, t0.units()[0].data);
        assert_eq!(t.units()[1].data, s.units()[1].data);
    }

    #[test]
    fn se_mask_length_mismatch() {
        let (mut t, s) = pair();
        let slots = t.enumerate_slots(Granularity::LayerWise);
        let mask = sample_mask(slots.len() + 1, 0.5, 0, 0).unwrap();
        assert!(matches!(apply_se(&mut t, &s, &mask, &slots), Err(Error::Mask(_))));
    }

    #[test]
    fn sts_preserved_slot_ignores_student() {
        let mut t = scalar(5.0);
        let slots = t.enumerate_slots(Granularity::LayerWise);
        let mask = MaskSample {
            flags: vec![true],
            seed_used: 0,
            draw_index: 0,
        };
        for m in [0.0, 0.5, 1.0] {
            apply_sts(&mut t, &scalar(-100.0), &mask, &slots, m).unwrap();
            assert_eq!(t.units()[0].data[0], 5.0);
        }
    }

    #[test]
    fn sts_rejects_bad_momentum() {
        let (mut t, s) = pair();
        let slots = t.enumerate_slots(Granularity::LayerWise);
        let mask = sample_mask(slots.len(), 0.5, 0, 0).unwrap();
        assert!(matches!(
            apply_sts(&mut t, &s, &mask, &slots, 1.2),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn none_is_noop() {
        let (t0, s) = pair();
        let mut t = t0.clone();
        let mask = smooth_step(&SmoothingConfig::none(), &mut t, &s, StepIndex(3)).unwrap();
        assert!(mask.is_none());
        assert_eq!(bits(&t), bits(&t0));
    }

    #[test]
    fn se_is_deterministic_per_step() {
        let (t0, s) = pair();
        let cfg = SmoothingConfig::se(0.999)
            .with_seed(11)
            .with_granularity(Granularity::NeuronWise);
        let mut a = t0.clone();
        let mut b = t0.clone();
        smooth_step(&cfg, &mut a, &s, StepIndex(5)).unwrap();
        smooth_step(&cfg, &mut b, &s, StepIndex(5)).unwrap();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn buffers_can_be_excluded() {
        let (t0, s) = pair();
        for method in [Method::Tma, Method::Se, Method::Sts] {
            let mut cfg = SmoothingConfig::new(method, 0.0, 0.5);
            cfg.include_buffers = false;
            let mut t = t0.clone();
            smooth_step(&cfg, &mut t, &s, StepIndex(0)).unwrap();
            assert_eq!(t.units()[2].data, t0.units()[2].data, "{method:?}");
            assert_ne!(t.units()[0].data, t0.units()[0].data, "{method:?}");

            cfg.include_buffers = true;
            let mut t = t0.clone();
            smooth_step(&cfg, &mut t, &s, StepIndex(0)).unwrap();
            assert_ne!(t.units()[2].data, t0.units()[2].data, "{method:?}");
        }
    }

    #[test]
    fn effective_momentum_values() {
        assert_eq!(effective_momentum(0.0, 0.9).unwrap(), 0.9);
        assert_eq!(effective_momentum(1.0, 0.3).unwrap(), 1.0);
        assert!((effective_momentum(0.7, 0.99).unwrap() - 0.997).abs() < 1e-15);
        assert!(effective_momentum(1.1, 0.5).is_err());
        assert!(effective_momentum(0.5, -0.5).is_err());
    }

    #[test]
    fn sts_monte_carlo_mean_matches_effective_momentum() {
        let student = scalar(0.0);
        let cfg = SmoothingConfig::sts(0.7, 0.99).with_seed(2024);
        let n = 10_000;
        let mut sum = 0.0;
        for t in 0..n {
            let mut teacher = scalar(1.0);
            smooth_step(&cfg, &mut teacher, &student, StepIndex(t)).unwrap();
            sum += teacher.units()[0].data[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 0.997).abs() <= 0.002, "mean = {mean}");
    }
}
