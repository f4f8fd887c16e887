use crate::error::{Error, Result};

/// Size-balanced cross-validation folds over case indices.
///
/// Cases are sorted by lesion volume, largest first (ties keep input
/// order), and dealt in serpentine order: forward through the folds, then
/// backward, and so on. Each fold therefore receives one case from every
/// block of `k` consecutive sizes.
pub fn size_balanced_folds(volumes: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > volumes.len() {
        return Err(Error::config(format!("cannot split {} cases into {k} folds", volumes.len())));
    }
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    order.sort_by(|&a, &b| volumes[b].cmp(&volumes[a]));
    let mut folds = vec![Vec::new(); k];
    for (j, &case) in order.iter().enumerate() {
        let (round, pos) = (j / k, j % k);
        let f = if round % 2 == 0 { pos } else { k - 1 - pos };
        folds[f].push(case);
    }
    Ok(folds)
}

/// Fold id of every case, in input order.
pub fn fold_assignment(volumes: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut out = vec![0; volumes.len()];
    for (f, fold) in size_balanced_folds(volumes, k)?.iter().enumerate() {
        for &c in fold {
            out[c] = f;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serpentine_dealing() {
        let v = [100, 80, 60, 40, 20, 10];
        let folds = size_balanced_folds(&v, 2).unwrap();
        let vols: Vec<Vec<usize>> = folds.iter().map(|f| f.iter().map(|&i| v[i]).collect()).collect();
        assert_eq!(vols, vec![vec![100, 40, 20], vec![80, 60, 10]]);
        assert_eq!(fold_assignment(&v, 2).unwrap(), vec![0, 1, 1, 0, 0, 1]);
    }

    #[test]
    fn singleton_folds_and_errors() {
        let v = [5, 9, 1];
        let folds = size_balanced_folds(&v, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        assert!(size_balanced_folds(&v, 0).is_err());
        assert!(size_balanced_folds(&v, 4).is_err());
    }
}
