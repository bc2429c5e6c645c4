use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::labels::ClassSet;

/// Ordered partition of the class universe into sessions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    /// Global class indices, sorted by name.
    pub class_order: Vec<usize>,
    pub base: usize,
    pub inc: usize,
    /// Global class indices of each session, in class order.
    pub sessions: Vec<Vec<usize>>,
}

/// Sorts `class_names` lexicographically and deals the first `base` classes
/// (or `inc` when `base == 0`) to session 1 and chunks of `inc` afterwards.
pub fn build_plan(class_names: &[String], base: usize, inc: usize) -> Result<SessionPlan> {
    let total = class_names.len();
    if total == 0 {
        return Err(config("plan needs at least one class"));
    }
    if base > total {
        return Err(config(format!("plan.base {base} exceeds the {total} classes")));
    }
    let first = if base == 0 { inc } else { base };
    if first == 0 {
        return Err(config("plan.inc must be positive when plan.base is 0"));
    }
    let rest = total
        .checked_sub(first)
        .ok_or_else(|| config(format!("plan.inc {inc} exceeds the {total} classes")))?;
    if rest > 0 && (inc == 0 || rest % inc != 0) {
        return Err(config(format!(
            "{rest} classes after the base session are not divisible into sessions of {inc}"
        )));
    }
    let mut class_order: Vec<usize> = (0..total).collect();
    class_order.sort_by(|&a, &b| class_names[a].cmp(&class_names[b]));
    let mut sessions = vec![class_order[..first].to_vec()];
    if rest > 0 {
        sessions.extend(class_order[first..].chunks(inc).map(<[usize]>::to_vec));
    }
    Ok(SessionPlan {
        class_order,
        base,
        inc,
        sessions,
    })
}

impl SessionPlan {
    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn universe(&self) -> usize {
        self.class_order.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.session_count() {
            return Err(Error::SessionOutOfRange {
                session: t,
                count: self.session_count(),
            });
        }
        Ok(())
    }

    /// `C^t` for 1-based `t`.
    pub fn classes(&self, t: usize) -> Result<&[usize]> {
        self.check(t)?;
        Ok(&self.sessions[t - 1])
    }

    /// Logit columns after session `t`: `C^1 ++ ... ++ C^t`.
    pub fn columns(&self, t: usize) -> Result<Vec<usize>> {
        self.check(t)?;
        Ok(self.sessions[..t].concat())
    }

    pub fn class_set(&self, t: usize) -> Result<ClassSet> {
        Ok(ClassSet::from_indices(
            self.universe(),
            self.classes(t)?.iter().copied(),
        ))
    }

    /// `C^{1~t}` as a set.
    pub fn seen_set(&self, t: usize) -> Result<ClassSet> {
        Ok(ClassSet::from_indices(self.universe(), self.columns(t)?))
    }

    /// 1-based session that introduces `class`.
    pub fn session_of(&self, class: usize) -> Option<usize> {
        self.sessions.iter().position(|s| s.contains(&class)).map(|i| i + 1)
    }

    /// Earliest session among `labels`, if any label is planned.
    pub fn earliest_session(&self, labels: &ClassSet) -> Option<usize> {
        labels.iter().filter_map(|c| self.session_of(c)).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::class_name;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(class_name).collect()
    }

    fn sizes(p: &SessionPlan) -> Vec<usize> {
        p.sessions.iter().map(Vec::len).collect()
    }

    #[test]
    fn paper_splits() {
        assert_eq!(sizes(&build_plan(&names(80), 0, 10).unwrap()), vec![10; 8]);
        assert_eq!(sizes(&build_plan(&names(20), 10, 2).unwrap()), vec![10, 2, 2, 2, 2, 2]);
        assert_eq!(
            sizes(&build_plan(&names(80), 40, 10).unwrap()),
            vec![40, 10, 10, 10, 10]
        );
        assert_eq!(build_plan(&names(80), 40, 10).unwrap().columns(3).unwrap().len(), 60);
    }

    #[test]
    fn joint_plan_has_one_session() {
        let p = build_plan(&names(20), 20, 5).unwrap();
        assert_eq!(sizes(&p), vec![20]);
        assert_eq!(sizes(&build_plan(&names(20), 20, 0).unwrap()), vec![20]);
    }

    #[test]
    fn remainder_is_rejected() {
        assert!(build_plan(&names(20), 0, 3).is_err());
        assert!(build_plan(&names(20), 5, 4).is_err());
        assert!(build_plan(&names(20), 21, 1).is_err());
        assert!(build_plan(&names(20), 0, 0).is_err());
        assert!(build_plan(&names(20), 10, 0).is_err());
    }

    #[test]
    fn lexicographic_order() {
        let shuffled = vec!["person".to_string(), "bicycle".into(), "car".into(), "apple".into()];
        let p = build_plan(&shuffled, 2, 1).unwrap();
        assert_eq!(p.sessions, vec![vec![3, 1], vec![2], vec![0]]);
        assert_eq!(p.session_of(0), Some(3));
        assert_eq!(p.earliest_session(&ClassSet::from_indices(4, [0, 2])), Some(2));
    }

    proptest! {
        #[test]
        fn sessions_partition_the_classes(inc in 1usize..6, sessions in 1usize..6, base_mult in 0usize..3) {
            let base = base_mult * inc;
            let total = if base == 0 { inc * sessions } else { base + inc * (sessions - 1) };
            let p = build_plan(&names(total), base, inc).unwrap();
            prop_assert_eq!(p.session_count(), sessions);
            let mut seen = ClassSet::empty(total);
            for t in 1..=p.session_count() {
                let c = p.class_set(t).unwrap();
                prop_assert!(c.is_disjoint(&seen));
                seen = seen.union(&c);
            }
            prop_assert_eq!(seen.len(), total);
        }
    }
}
