use super::SliceImage;
use crate::error::{contract, Result};

#[derive(Clone, Debug, Default)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    pub warnings: Vec<String>,
}

/// Items carrying a patient identifier.
pub trait PatientKeyed {
    fn patient(&self) -> &str;
}

impl PatientKeyed for SliceImage {
    fn patient(&self) -> &str {
        &self.patient_id
    }
}

/// Every item of `holdout` goes to test, all others to train, order kept.
pub fn split_patients<T: PatientKeyed>(items: Vec<T>, holdout: &str) -> Result<Split<T>> {
    if !items.iter().any(|s| s.patient() == holdout) {
        return contract(format!("holdout patient {holdout:?} not in corpus"));
    }
    let (test, train): (Vec<T>, Vec<T>) = items.into_iter().partition(|s| s.patient() == holdout);
    let mut warnings = Vec::new();
    if train.is_empty() {
        let msg = format!("holdout {holdout:?} is the only patient; training set is empty");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Split {
        train,
        test,
        warnings,
    })
}
