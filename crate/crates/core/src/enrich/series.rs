use crate::error::{Error, Result};

/// Hour-resolution series (smart-meter data). `hours` are elapsed hours from
/// a common origin and must be strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlySeries {
    pub transformer: String,
    pub hours: Vec<i64>,
    pub values: Vec<f64>,
}

impl HourlySeries {
    pub fn new(transformer: impl Into<String>, hours: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        let s = HourlySeries {
            transformer: transformer.into(),
            hours,
            values,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        if self.hours.len() != self.values.len() {
            return Err(Error::Data(format!(
                "{}: {} timestamps for {} values",
                self.transformer,
                self.hours.len(),
                self.values.len()
            )));
        }
        if self.hours.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!("{}: timestamps not increasing", self.transformer)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite value", self.transformer)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits into consecutive days of `hours_per_day` values, keyed by
    /// hour-of-day. Incomplete days are dropped.
    pub fn daily_patterns(&self, hours_per_day: usize) -> Vec<Vec<f64>> {
        daily_patterns(&self.hours, &self.values, hours_per_day)
    }
}

pub(crate) fn daily_patterns(hours: &[i64], values: &[f64], hours_per_day: usize) -> Vec<Vec<f64>> {
    let hpd = hours_per_day as i64;
    let mut days: std::collections::BTreeMap<i64, Vec<Option<f64>>> = Default::default();
    for (h, v) in hours.iter().zip(values) {
        let day = h.div_euclid(hpd);
        let slot = h.rem_euclid(hpd) as usize;
        days.entry(day).or_insert_with(|| vec![None; hours_per_day])[slot] = Some(*v);
    }
    days.into_values()
        .filter_map(|d| d.into_iter().collect::<Option<Vec<f64>>>())
        .collect()
}

/// Contiguous high-resolution series covering whole hours starting at
/// `start_hour`, with `samples_per_hour` samples per hour.
#[derive(Debug, Clone, PartialEq)]
pub struct HighResSeries {
    pub transformer: String,
    pub start_hour: i64,
    pub samples_per_hour: usize,
    pub values: Vec<f64>,
}

/// Mean, minimum and maximum of one hour of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourSummary {
    pub hour: i64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl HighResSeries {
    pub fn new(
        transformer: impl Into<String>,
        start_hour: i64,
        samples_per_hour: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let s = HighResSeries {
            transformer: transformer.into(),
            start_hour,
            samples_per_hour,
            values,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        if self.samples_per_hour == 0 || !self.values.len().is_multiple_of(self.samples_per_hour) {
            return Err(Error::Data(format!(
                "{}: {} samples is not a whole number of {}-sample hours",
                self.transformer,
                self.values.len(),
                self.samples_per_hour
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite sample", self.transformer)));
        }
        Ok(())
    }

    pub fn n_hours(&self) -> usize {
        self.values.len() / self.samples_per_hour.max(1)
    }

    /// Samples of each hour, paired with the elapsed-hour index.
    pub fn hours(&self) -> impl Iterator<Item = (i64, &[f64])> + '_ {
        self.values
            .chunks(self.samples_per_hour)
            .enumerate()
            .map(move |(k, c)| (self.start_hour + k as i64, c))
    }

    pub fn summaries(&self) -> Vec<HourSummary> {
        self.hours()
            .map(|(hour, c)| {
                let mean = c.iter().sum::<f64>() / c.len() as f64;
                let (min, max) = c
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                HourSummary { hour, mean, min, max }
            })
            .collect()
    }

    /// Hourly averages, i.e. what a smart meter on this transformer would
    /// have recorded.
    pub fn to_hourly(&self) -> HourlySeries {
        let (hours, values) = self.summaries().iter().map(|s| (s.hour, s.mean)).unzip();
        HourlySeries {
            transformer: self.transformer.clone(),
            hours,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summaries_and_hourly() {
        let s = HighResSeries::new("t", 5, 3, vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0]).unwrap();
        let sm = s.summaries();
        assert_eq!(sm.len(), 2);
        assert_eq!(
            sm[0],
            HourSummary {
                hour: 5,
                mean: 2.0,
                min: 1.0,
                max: 3.0
            }
        );
        assert_eq!(s.to_hourly().values, vec![2.0, 4.0]);
        assert_eq!(s.to_hourly().hours, vec![5, 6]);
    }

    #[test]
    fn rejects_partial_hours_and_bad_order() {
        assert!(HighResSeries::new("t", 0, 3, vec![1.0; 4]).is_err());
        assert!(HourlySeries::new("t", vec![0, 2, 1], vec![0.0; 3]).is_err());
        assert!(HourlySeries::new("t", vec![0, 1], vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn daily_patterns_drop_incomplete_days() {
        let hours: Vec<i64> = (0..10).collect();
        let values: Vec<f64> = (0..10).map(|h| h as f64).collect();
        let s = HourlySeries::new("t", hours, values).unwrap();
        let days = s.daily_patterns(4);
        assert_eq!(days, vec![vec![0.0, 1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0]]);
    }
}
