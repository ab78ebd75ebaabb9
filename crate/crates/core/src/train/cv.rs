use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::seeded_stream;

/// Sample indices of one fold, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

struct Patient {
    samples: Vec<usize>,
}

/// Patient-grouped stratified k-fold split.
///
/// Patients take the majority label of their samples. Each class's patients
/// are shuffled with `seed` and placed one at a time into the fold holding
/// the fewest samples of that class (fewest patients, then lowest index,
/// breaking ties).
pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut patients: Vec<Patient> = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let p = *index.entry(s.patient_id.as_str()).or_insert_with(|| {
            patients.push(Patient { samples: Vec::new() });
            patients.len() - 1
        });
        patients[p].samples.push(i);
    }

    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (p, patient) in patients.iter().enumerate() {
        let pos = patient.samples.iter().filter(|&&i| ds.samples[i].label == 1).count();
        let label = usize::from(2 * pos > patient.samples.len());
        by_class[label].push(p);
    }
    for class in &by_class {
        if class.len() < k {
            return Err(Error::TooFewPatients {
                needed: k,
                folds: k,
                found: class.len(),
            });
        }
    }

    let mut assignment = vec![0usize; patients.len()];
    for (label, class) in by_class.iter_mut().enumerate() {
        class.shuffle(&mut seeded_stream(seed, label as u64));
        let mut load = vec![(0usize, 0usize); k];
        for &p in class.iter() {
            let fold = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
            load[fold].0 += patients[p].samples.len();
            load[fold].1 += 1;
            assignment[p] = fold;
        }
    }

    let mut test_sets = vec![Vec::new(); k];
    for (p, patient) in patients.iter().enumerate() {
        test_sets[assignment[p]].extend_from_slice(&patient.samples);
    }
    Ok(test_sets
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let mut in_test = vec![false; ds.len()];
            for &i in &test {
                in_test[i] = true;
            }
            let train = (0..ds.len()).filter(|&i| !in_test[i]).collect();
            Fold { train, test }
        })
        .collect())
}
