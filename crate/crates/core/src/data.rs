//! Labeled image sets, the `FDS1` binary format, a synthetic generator,
//! client partitioning and salt-and-pepper corruption.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, FormatError, Result};
use crate::rng::{derived_rng, Rng};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FDS1";

/// Images of 8-bit intensities with class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    /// Each `channels * side * side` bytes, channel-major.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        channels: usize,
        side: usize,
        num_classes: usize,
        images: Vec<Vec<u8>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if channels == 0 || side == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument("channels, side and classes must be positive".into()));
        }
        if num_classes > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument("labels are stored as u16".into()));
        }
        let plane = channels * side * side;
        if let Some(i) = images.iter().position(|im| im.len() != plane) {
            return Err(Error::InvalidArgument(format!("image {i} does not have {plane} values")));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(FormatError::LabelOutOfRange {
                index,
                label,
                num_classes,
            }
            .into());
        }
        Ok(Self {
            channels,
            side,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, s, s]` tensor of raw intensities.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.images[i].iter().map(|&b| b as f32).collect();
        Tensor::new(vec![self.channels, self.side, self.side], data).expect("validated at construction")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            channels: self.channels,
            side: self.side,
            num_classes: self.num_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.len(), self.num_classes, self.channels, self.side] {
            let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for (image, &label) in self.images.iter().zip(&self.labels) {
            w.write_all(&(label as u16).to_le_bytes())?;
            w.write_all(image)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(FormatError::BadMagic { expected: "FDS1" }.into());
        }
        let mut header = [0usize; 4];
        for h in &mut header {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "header")?;
            *h = u32::from_le_bytes(b) as usize;
        }
        let [n, num_classes, channels, side] = header;
        if n == 0 {
            return Err(FormatError::Empty.into());
        }
        if num_classes == 0 || channels == 0 || side == 0 {
            return Err(FormatError::Malformed("zero classes, channels or side".into()).into());
        }
        let plane = channels * side * side;
        let mut images = Vec::with_capacity(n.min(1 << 16));
        let mut labels = Vec::with_capacity(n.min(1 << 16));
        for index in 0..n {
            let mut b = [0u8; 2];
            read_exact(&mut r, &mut b, "record label")?;
            let label = u16::from_le_bytes(b) as usize;
            if label >= num_classes {
                return Err(FormatError::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                }
                .into());
            }
            let mut image = vec![0u8; plane];
            read_exact(&mut r, &mut image, "record pixels")?;
            images.push(image);
            labels.push(label);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(FormatError::Malformed("trailing bytes after the last record".into()).into());
        }
        Self::new(channels, side, num_classes, images, labels)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(FormatError::Truncated(what)),
        _ => Error::Io(e),
    })
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    LabeledDataset::read_from(std::io::BufReader::new(file))
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    dataset.write_to(&mut buf)?;
    crate::io::write_atomic(path, &buf)
}

/// Seed of the class templates; shared by every synthetic draw so train and
/// test sets agree on what each class looks like.
const TEMPLATE_SEED: u64 = 0x7e3a_1c55;

/// Bars and blobs at class-specific places, one intensity per channel.
/// Values are in `[0, 1]`.
fn class_template(class: usize, channels: usize, side: usize) -> Vec<f32> {
    let mut rng = derived_rng(TEMPLATE_SEED, &[class as u64]);
    let plane = side * side;
    let mut mask = vec![0.0f32; plane];
    let strokes = 2 + class % 2;
    for _ in 0..strokes {
        let thick = (side / 8).max(1) + rng.random_range(0..2);
        let span = rng.random_range(side / 3..=side - side / 4);
        let at = rng.random_range(0..side - thick + 1);
        let from = rng.random_range(0..side - span + 1);
        match rng.random_range(0..3) {
            0 => {
                for r in at..at + thick {
                    mask[r * side + from..r * side + from + span].fill(1.0);
                }
            }
            1 => {
                for r in from..from + span {
                    mask[r * side + at..r * side + at + thick].fill(1.0);
                }
            }
            _ => {
                let radius = (side as f32 / 8.0).max(1.5) + rng.random::<f32>() * side as f32 / 8.0;
                let cy = rng.random_range(0..side) as f32;
                let cx = rng.random_range(0..side) as f32;
                for r in 0..side {
                    for c in 0..side {
                        let (dy, dx) = (r as f32 - cy, c as f32 - cx);
                        if dy * dy + dx * dx <= radius * radius {
                            mask[r * side + c] = 1.0;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(channels * plane);
    for _ in 0..channels {
        let level = rng.random_range(0.7f32..1.0);
        out.extend(mask.iter().map(|&m| m * level));
    }
    out
}

/// `per_class` noisy copies of each class template: template pixels near 200,
/// background 0, uniform noise of ±20 clamped to the byte range. Shuffled.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    channels: usize,
    side: usize,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("need at least one class and one sample per class".into()));
    }
    if side < 4 || channels == 0 {
        return Err(Error::InvalidArgument("synthetic images need side >= 4 and a channel".into()));
    }
    let templates: Vec<Vec<f32>> = (0..num_classes).map(|c| class_template(c, channels, side)).collect();
    let mut order: Vec<usize> = (0..num_classes * per_class).map(|i| i % num_classes).collect();
    order.shuffle(rng);
    let mut images = Vec::with_capacity(order.len());
    for &class in &order {
        let image = templates[class]
            .iter()
            .map(|&t| (t * 200.0 + rng.random_range(-20.0f32..=20.0)).round().clamp(0.0, 255.0) as u8)
            .collect();
        images.push(image);
    }
    LabeledDataset::new(channels, side, num_classes, images, order)
}

/// Sample indices held by each client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Disjoint, in range and with no empty client.
    pub fn is_valid_for(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for client in &self.assignments {
            if client.is_empty() {
                return false;
            }
            for &i in client {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        true
    }

    /// Keeps a random subset of at most `max` samples per client.
    pub fn truncated(&self, max: usize, rng: &mut Rng) -> Result<Self> {
        if max == 0 {
            return Err(Error::InvalidArgument("clients must keep at least one sample".into()));
        }
        let assignments = self
            .assignments
            .iter()
            .map(|client| {
                let mut kept: Vec<usize> = if client.len() > max {
                    let mut picked: Vec<usize> = index::sample(rng, client.len(), max).into_iter().map(|j| client[j]).collect();
                    picked.sort_unstable();
                    picked
                } else {
                    client.clone()
                };
                kept.shrink_to_fit();
                kept
            })
            .collect();
        Ok(Self { assignments })
    }
}

/// Every client receives exactly `per_class` samples of every class, drawn
/// without replacement.
pub fn partition_iid(dataset: &LabeledDataset, clients: usize, per_class: usize, rng: &mut Rng) -> Result<Partition> {
    if clients == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("need at least one client and one sample per class".into()));
    }
    let required = clients * per_class;
    let mut assignments = vec![Vec::with_capacity(per_class * dataset.num_classes); clients];
    for (class, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.len() < required {
            return Err(Error::InsufficientClass {
                class,
                available: idx.len(),
                required,
            });
        }
        idx.shuffle(rng);
        for (k, client) in assignments.iter_mut().enumerate() {
            client.extend_from_slice(&idx[k * per_class..(k + 1) * per_class]);
        }
    }
    for client in &mut assignments {
        client.sort_unstable();
    }
    Ok(Partition { assignments })
}

/// Per class, proportions over clients from a symmetric Dirichlet(`mu`);
/// the class's shuffled samples are cut at the rounded cumulative shares.
/// Clients left empty take one sample from the currently largest client.
pub fn partition_dirichlet(dataset: &LabeledDataset, clients: usize, mu: f64, rng: &mut Rng) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidArgument(format!("Dirichlet concentration must be positive, got {mu}")));
    }
    if dataset.len() < clients {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot fill {clients} clients",
            dataset.len()
        )));
    }
    let gamma = Gamma::new(mu, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut assignments = vec![Vec::new(); clients];
    for mut idx in dataset.class_indices() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let shares: Vec<f64> = if total > 0.0 {
            draws.iter().map(|d| d / total).collect()
        } else {
            // every draw underflowed: the limit of a tiny concentration is a one-hot share
            let mut one_hot = vec![0.0; clients];
            one_hot[rng.random_range(0..clients)] = 1.0;
            one_hot
        };
        let n = idx.len();
        let mut start = 0;
        let mut acc = 0.0;
        for (k, share) in shares.iter().enumerate() {
            acc += share;
            let end = if k + 1 == clients { n } else { ((acc * n as f64).round() as usize).clamp(start, n) };
            assignments[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by_key(|&k| (assignments[k].len(), std::cmp::Reverse(k)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client holds samples");
        assignments[empty].push(moved);
    }
    for client in &mut assignments {
        client.sort_unstable();
    }
    Ok(Partition { assignments })
}

/// Mean over clients of the Shannon entropy (nats) of their label histograms.
pub fn mean_class_entropy(dataset: &LabeledDataset, partition: &Partition) -> f64 {
    let mut total = 0.0;
    for client in &partition.assignments {
        let mut counts = vec![0usize; dataset.num_classes];
        for &i in client {
            counts[dataset.labels[i]] += 1;
        }
        let n = client.len() as f64;
        total -= counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>();
    }
    total / partition.num_clients() as f64
}

/// Sets exactly `round(ratio * C * s * s)` distinct positions of every image
/// to 0 or 255 with equal probability.
pub fn add_salt_pepper(dataset: &LabeledDataset, ratio: f64, rng: &mut Rng) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("noise ratio must lie in [0, 1], got {ratio}")));
    }
    let plane = dataset.channels * dataset.side * dataset.side;
    let count = (ratio * plane as f64).round() as usize;
    let mut out = dataset.clone();
    if count == 0 {
        return Ok(out);
    }
    for image in &mut out.images {
        for pos in index::sample(rng, plane, count) {
            image[pos] = if rng.random::<bool>() { 255 } else { 0 };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(1, 2, 3, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![255; 4]], vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn format_round_trip_and_errors() {
        let d = tiny();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 3 * 6);
        assert_eq!(LabeledDataset::read_from(buf.as_slice()).unwrap(), d);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            LabeledDataset::read_from(bad.as_slice()),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            LabeledDataset::read_from(&buf[..buf.len() - 1]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
        let mut out_of_range = buf.clone();
        out_of_range[20] = 3;
        assert!(matches!(
            LabeledDataset::read_from(out_of_range.as_slice()),
            Err(Error::Format(FormatError::LabelOutOfRange { index: 0, label: 3, .. }))
        ));
        let mut empty = buf[..20].to_vec();
        empty[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            LabeledDataset::read_from(empty.as_slice()),
            Err(Error::Format(FormatError::Empty))
        ));
    }

    #[test]
    fn salt_pepper_counts() {
        let mut rng = rng_from(3);
        let d = LabeledDataset::new(3, 28, 2, vec![vec![128; 2352]; 4], vec![0, 1, 1, 0]).unwrap();
        let noisy = add_salt_pepper(&d, 0.1, &mut rng).unwrap();
        for image in &noisy.images {
            assert_eq!(image.iter().filter(|&&v| v != 128).count(), 235);
        }
        assert_eq!(add_salt_pepper(&d, 0.0, &mut rng).unwrap(), d);
        let full = add_salt_pepper(&d, 1.0, &mut rng).unwrap();
        assert!(full.images.iter().flatten().all(|&v| v == 0 || v == 255));
        assert_eq!(full.labels, d.labels);
        assert!(add_salt_pepper(&d, 1.5, &mut rng).is_err());
    }

    #[test]
    fn iid_single_client_and_shortage() {
        let mut rng = rng_from(1);
        let d = synth_dataset(3, 4, 1, 8, &mut rng).unwrap();
        let p = partition_iid(&d, 1, 2, &mut rng).unwrap();
        assert_eq!(p.sizes(), vec![6]);
        match partition_iid(&d, 2, 3, &mut rng) {
            Err(Error::InsufficientClass { class: 0, available: 4, required: 6 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dirichlet_single_client_takes_everything() {
        let mut rng = rng_from(2);
        let d = synth_dataset(3, 5, 1, 8, &mut rng).unwrap();
        let p = partition_dirichlet(&d, 1, 0.01, &mut rng).unwrap();
        assert_eq!(p.assignments[0], (0..15).collect::<Vec<_>>());
    }
}
