//! Grid values shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// One physical state: `channels × height × width` values in row-major `(C, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "field dimensions must be positive, got ({channels}, {height}, {width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "field ({channels}, {height}, {width}) needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty field");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Static physical constants `κ` attached to a trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::shape(format!(
                "{} parameter names for {} values",
                names.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter `{}`", names[bad])));
        }
        Ok(Self { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Time-ordered frames of one simulation with a shared grid shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<Field>,
    dt: f64,
    params: ParamVector,
}

impl Trajectory {
    pub fn new(frames: Vec<Field>, dt: f64, params: ParamVector) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        if let Some(first) = frames.first() {
            let shape = first.shape();
            if let Some(t) = frames.iter().position(|f| f.shape() != shape) {
                return Err(Error::shape(format!(
                    "frame {t} has shape {:?}, expected {shape:?}",
                    frames[t].shape()
                )));
            }
        }
        Ok(Self { frames, dt, params })
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// `(C, H, W)` of the frames, `None` for an empty trajectory.
    pub fn frame_shape(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(Field::shape)
    }

    /// Flattened `(T, C, H, W)` data.
    pub fn to_flat(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect()
    }

    pub fn map_frames(&self, f: impl FnMut(&Field) -> Result<Field>) -> Result<Self> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.dt, self.params.clone())
    }
}

/// Per-channel affine normalisation `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::shape(format!(
                "standardizer needs matching non-empty mean/std, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(c) = std.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "standard deviation of channel {c} must be positive, got {}",
                std[c]
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("standardizer mean".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits per-channel statistics over every frame and grid point (two-pass
    /// mean then population variance).
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Field> + Clone) -> Result<Self> {
        let mut iter = frames.clone().into_iter().peekable();
        let channels = match iter.peek() {
            Some(f) => f.channels(),
            None => return Err(Error::invalid("cannot fit a standardizer on no data")),
        };
        let mut count = 0usize;
        let mut sums = vec![0.0; channels];
        for f in frames.clone() {
            if f.channels() != channels {
                return Err(Error::shape("frames with differing channel counts"));
            }
            count += f.plane_len();
            for (c, s) in sums.iter_mut().enumerate() {
                *s += f.channel(c).iter().sum::<f64>();
            }
        }
        let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for f in frames {
            for (c, s) in sq.iter_mut().enumerate() {
                let m = mean[c];
                *s += f.channel(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, field: &Field) -> Result<Field> {
        self.check(field)?;
        Ok(self.apply(field, |v, m, s| (v - m) / s))
    }

    pub fn destandardize(&self, field: &Field) -> Result<Field> {
        self.check(field)?;
        Ok(self.apply(field, |v, m, s| v * s + m))
    }

    fn check(&self, field: &Field) -> Result<()> {
        if field.channels() != self.channels() {
            return Err(Error::shape(format!(
                "field has {} channels, standardizer has {}",
                field.channels(),
                self.channels()
            )));
        }
        Ok(())
    }

    fn apply(&self, field: &Field, op: impl Fn(f64, f64, f64) -> f64) -> Field {
        let mut out = field.clone();
        for c in 0..field.channels() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in out.channel_mut(c) {
                *v = op(*v, m, s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_rejects_wrong_length() {
        assert!(Field::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Field::new(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn standardize_hand_example() {
        let f = Field::new(2, 1, 2, vec![2.0, 4.0, 10.0, 20.0]).unwrap();
        let s = Standardizer::new(vec![3.0, 15.0], vec![1.0, 5.0]).unwrap();
        assert_eq!(s.standardize(&f).unwrap().data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn standardize_mean_field_is_zero() {
        let s = Standardizer::new(vec![3.0, -2.0], vec![0.5, 4.0]).unwrap();
        let f = Field::from_fn(2, 3, 3, |c, _, _| s.mean()[c]);
        assert!(s.standardize(&f).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_standardizer_is_identity() {
        let f = Field::from_fn(1, 2, 3, |_, y, x| (y * 3 + x) as f64 * 0.37 - 1.0);
        let s = Standardizer::identity(1);
        assert_eq!(s.standardize(&f).unwrap(), f);
    }

    #[test]
    fn destandardize_examples() {
        let s = Standardizer::new(vec![3.0], vec![2.0]).unwrap();
        let z = Field::zeros(1, 2, 2);
        assert!(s.destandardize(&z).unwrap().data().iter().all(|v| *v == 3.0));

        let s = Standardizer::new(vec![3.0], vec![1.0]).unwrap();
        let f = Field::new(1, 1, 2, vec![-1.0, 1.0]).unwrap();
        assert_eq!(s.destandardize(&f).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn standardizer_errors() {
        assert!(Standardizer::new(vec![0.0], vec![0.0]).is_err());
        assert!(Standardizer::new(vec![0.0], vec![-1.0]).is_err());
        let s = Standardizer::identity(2);
        assert!(s.standardize(&Field::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn fitted_standardizer_normalises_its_data() {
        let frames: Vec<Field> = (0..5)
            .map(|t| {
                Field::from_fn(2, 4, 4, |c, y, x| {
                    let v = (t * 31 + y * 7 + x * 3 + c * 11) as f64;
                    (v * 0.731).sin() * (c as f64 + 1.0) * 10.0 + 100.0 * c as f64
                })
            })
            .collect();
        let s = Standardizer::fit(frames.iter()).unwrap();
        let z: Vec<Field> = frames.iter().map(|f| s.standardize(f).unwrap()).collect();
        let check = Standardizer::fit(z.iter()).unwrap();
        for c in 0..2 {
            assert!(check.mean()[c].abs() < 1e-10);
            assert!((check.std()[c] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn trajectory_rejects_mixed_shapes() {
        let frames = vec![Field::zeros(1, 2, 2), Field::zeros(1, 4, 2)];
        assert!(Trajectory::new(frames, 0.1, ParamVector::default()).is_err());
        assert!(Trajectory::new(vec![], 0.0, ParamVector::default()).is_err());
    }

    #[test]
    fn param_vector_lengths_must_match() {
        assert!(ParamVector::new(vec!["nu".into()], vec![]).is_err());
        assert!(ParamVector::new(vec!["nu".into()], vec![f64::NAN]).is_err());
    }
}
