use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type for all model math. Implemented for f32 (training speed) and
/// f64 (finite-difference gradient checks need the extra precision).
pub trait Real: NdFloat + FromPrimitive + ToPrimitive + Send + Sync {
    /// Lossy conversion from f64; panics only if the target type cannot
    /// represent any nearby value, which cannot happen for f32/f64.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 convertible to Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real convertible to f64")
    }

    /// Standard normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform draw from the open interval (0, 1). Endpoints are excluded so
    /// logit-style transforms stay finite.
    fn unit_open<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn unit_open<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v: f32 = rng.gen();
            if v > 0.0 {
                return v;
            }
        }
    }
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn unit_open<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v: f64 = rng.gen();
            if v > 0.0 {
                return v;
            }
        }
    }
}
