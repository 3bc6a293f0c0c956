//! Ordered target-domain streams.
//!
//! Every segment corrupts the full test set with one domain and cuts it into
//! batches in dataset order. The true labels and domain tags travel beside
//! the images in [`BatchTruth`] and are meant for scoring only.

use std::fmt;

use crate::data::corrupt::{corrupt, CorruptionSpec, Family};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Stream};
use crate::tensor::Tensor;

/// One target domain. `corruption: None` is the clean source distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Domain {
    pub corruption: Option<Family>,
    pub severity: u8,
}

impl Domain {
    pub const CLEAN: Domain = Domain {
        corruption: None,
        severity: 0,
    };

    pub fn new(family: Family, severity: u8) -> Self {
        Self {
            corruption: Some(family),
            severity,
        }
    }

    pub fn family_name(&self) -> &'static str {
        self.corruption.map_or("clean", Family::name)
    }

    /// Corruption seed of this domain; the same domain always sees the same
    /// corruption noise, so reoccurring domains are identical.
    fn corruption_seed(&self, seed: u64) -> u64 {
        let tag = self.corruption.map_or(0, |f| f.index() as u64 + 1) * 8 + u64::from(self.severity);
        derive_seed(seed, Stream::Corruption, tag)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.corruption {
            None => f.write_str("clean"),
            Some(fam) => write!(f, "{fam}@{}", self.severity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schedule {
    /// Each family once, all at one severity.
    Standard { families: Vec<Family>, severity: u8 },
    /// Each family walks severity 1,2,3,4,5,4,3,2,1.
    Gradual { families: Vec<Family> },
    /// The domain list repeated `rounds` times.
    Rounds { domains: Vec<Domain>, rounds: usize },
}

impl Schedule {
    /// The ordered domain segments with their round index.
    pub fn segments(&self) -> Result<Vec<(Domain, usize)>> {
        let segs: Vec<(Domain, usize)> = match self {
            Schedule::Standard { families, severity } => {
                if !(1..=5).contains(severity) {
                    return Err(Error::OutOfRange(format!("severity {severity}")));
                }
                families.iter().map(|&f| (Domain::new(f, *severity), 0)).collect()
            }
            Schedule::Gradual { families } => families
                .iter()
                .flat_map(|&f| [1, 2, 3, 4, 5, 4, 3, 2, 1].map(|s| (Domain::new(f, s), 0)))
                .collect(),
            Schedule::Rounds { domains, rounds } => {
                if let Some(d) = domains.iter().find(|d| d.severity > 5 || (d.corruption.is_some() && d.severity == 0)) {
                    return Err(Error::OutOfRange(format!("domain {d}")));
                }
                (0..*rounds)
                    .flat_map(|r| domains.iter().map(move |&d| (d, r)))
                    .collect()
            }
        };
        if segs.is_empty() {
            return Err(Error::EmptySchedule);
        }
        Ok(segs)
    }
}

/// Evaluation-only facts about one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTruth {
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub segment: usize,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub images: Tensor,
    pub truth: BatchTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainStream {
    pub batches: Vec<StreamBatch>,
    pub segments: Vec<Domain>,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Indices of the first batch of every segment after the first.
    pub fn boundaries(&self) -> Vec<usize> {
        self.batches
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].truth.segment != w[1].truth.segment)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

pub fn build_stream(
    images: &Tensor,
    labels: &[usize],
    schedule: &Schedule,
    batch_size: usize,
    seed: u64,
) -> Result<DomainStream> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != n {
        return Err(Error::Config(format!("{n} images but {} labels", labels.len())));
    }
    let segs = schedule.segments()?;
    let mut batches = Vec::new();
    for (segment, &(domain, round)) in segs.iter().enumerate() {
        let data = match domain.corruption {
            None => images.clone(),
            Some(family) => corrupt(
                images,
                &CorruptionSpec {
                    family,
                    severity: domain.severity,
                    seed: domain.corruption_seed(seed),
                },
            )?,
        };
        for start in (0..n).step_by(batch_size) {
            let end = (start + batch_size).min(n);
            batches.push(StreamBatch {
                images: data.slice_outer(start, end),
                truth: BatchTruth {
                    labels: labels[start..end].to_vec(),
                    domain,
                    segment,
                    round,
                },
            });
        }
    }
    Ok(DomainStream {
        batches,
        segments: segs.into_iter().map(|(d, _)| d).collect(),
    })
}
