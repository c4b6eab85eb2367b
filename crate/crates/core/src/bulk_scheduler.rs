//! Placement of bulk job groups.
//!
//! A group is first considered as one unit on the best single site. It is
//! also split into subgroups that are placed one by one through the site
//! selector; the sites that receive a subgroup then share the group in
//! proportion to their CPU counts so they finish together. Whichever plan
//! has the lower fluid makespan is kept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GroupId, Job, JobGroup, JobId, NetworkMatrix, SiteId, SiteState};
use crate::site_selector::{SelectError, SiteSelector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BulkError {
    #[error("group {0} has no jobs")]
    EmptyGroup(GroupId),
    #[error("no alive site")]
    NoAliveSite,
    #[error("group {group} of {size} jobs exceeds the capacity of every placement")]
    CapacityExceeded { group: GroupId, size: usize },
    #[error("assignment names unknown site {0}")]
    UnknownSite(SiteId),
    #[error("group {group} is incomplete: subgroups {missing:?} have not finished")]
    IncompleteGroup { group: GroupId, missing: Vec<usize> },
    #[error("output of group {found} handed to aggregation of group {expected}")]
    ForeignOutput { expected: GroupId, found: GroupId },
    #[error(transparent)]
    Select(#[from] SelectError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub subgroup: usize,
    pub site: SiteId,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlacement {
    pub group: GroupId,
    pub assignments: Vec<Assignment>,
    pub predicted_makespan: f64,
    pub aggregation_destination: SiteId,
}

impl GroupPlacement {
    pub fn total_jobs(&self) -> usize {
        self.assignments.iter().map(|a| a.jobs).sum()
    }

    pub fn site_count(&self) -> usize {
        let mut sites: Vec<&SiteId> = self.assignments.iter().map(|a| &a.site).collect();
        sites.sort();
        sites.dedup();
        sites.len()
    }

    /// Hands the group's jobs, in order, to the assignments.
    pub fn split_jobs(&self, group: JobGroup) -> Vec<(Assignment, Vec<Job>)> {
        let mut jobs = group.jobs.into_iter();
        self.assignments
            .iter()
            .map(|a| (a.clone(), jobs.by_ref().take(a.jobs).collect()))
            .collect()
    }
}

/// Subgroup size implied by a division factor.
pub fn subgroup_size_for(group_size: usize, division_factor: u32) -> usize {
    group_size.div_ceil(division_factor.max(1) as usize).max(1)
}

/// Splits `group` into pieces of `subgroup_size` jobs; only the last may be smaller.
pub fn partition(group: &JobGroup, subgroup_size: usize) -> Vec<JobGroup> {
    let size = subgroup_size.max(1);
    if group.jobs.len() <= size {
        return vec![group.clone()];
    }
    group
        .jobs
        .chunks(size)
        .enumerate()
        .map(|(i, chunk)| JobGroup {
            id: group.id,
            owner: group.owner.clone(),
            jobs: chunk.to_vec(),
            declared_size: chunk.len(),
            division_factor: group.division_factor,
            subgroup: Some(i),
        })
        .collect()
}

/// Fluid makespan: the largest `jobs * service_time / cpus` over the assigned sites.
pub fn predicted_makespan(assignments: &[Assignment], sites: &[SiteState], service_time: f64) -> Result<f64, BulkError> {
    let mut per_site: BTreeMap<&SiteId, usize> = BTreeMap::new();
    for a in assignments {
        *per_site.entry(&a.site).or_default() += a.jobs;
    }
    per_site.into_iter().try_fold(0.0f64, |acc, (id, jobs)| {
        let site = sites
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| BulkError::UnknownSite(id.clone()))?;
        Ok(acc.max(jobs as f64 * service_time / f64::from(site.cpu_count)))
    })
}

fn cap(site: &SiteState) -> usize {
    site.max_jobs_per_user.map_or(usize::MAX, |c| c as usize)
}

/// Splits `total` over sites proportionally to `weights`, honoring caps.
/// Rounding uses largest remainders, ties to the earlier site.
fn proportional_split(total: usize, weights: &[u32], caps: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; weights.len()];
    let mut active: Vec<usize> = (0..weights.len()).collect();
    let mut left = total;
    while left > 0 && !active.is_empty() {
        let weight_sum: f64 = active.iter().map(|&i| f64::from(weights[i])).sum();
        let shares: Vec<f64> = active
            .iter()
            .map(|&i| left as f64 * f64::from(weights[i]) / weight_sum)
            .collect();
        let mut alloc: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let mut rest = left - alloc.iter().sum::<usize>();
        let mut by_remainder: Vec<usize> = (0..active.len()).collect();
        by_remainder.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
        for k in by_remainder {
            if rest == 0 {
                break;
            }
            alloc[k] += 1;
            rest -= 1;
        }
        let over: Vec<usize> = (0..active.len())
            .filter(|&k| counts[active[k]] + alloc[k] > caps[active[k]])
            .collect();
        if over.is_empty() {
            for (k, &i) in active.iter().enumerate() {
                counts[i] += alloc[k];
            }
            break;
        }
        for &k in &over {
            let i = active[k];
            left -= caps[i] - counts[i];
            counts[i] = caps[i];
        }
        active = active
            .iter()
            .enumerate()
            .filter(|(k, _)| !over.contains(k))
            .map(|(_, &i)| i)
            .collect();
    }
    counts
}

fn with_pending(sites: &[SiteState], pending: &BTreeMap<SiteId, usize>, extra: usize, min_room: usize) -> Vec<SiteState> {
    sites
        .iter()
        .map(|s| {
            let mut s = s.clone();
            let used = pending.get(&s.id).copied().unwrap_or(0);
            s.waiting_queue_length += used + extra;
            s.alive = s.alive && cap(&s).saturating_sub(used) >= min_room;
            s
        })
        .collect()
}

fn select_or_none(
    selector: &SiteSelector,
    job: &Job,
    sites: &[SiteState],
    network: &NetworkMatrix,
) -> Result<Option<SiteId>, BulkError> {
    match selector.select_site(job, sites, network) {
        Ok(s) => Ok(Some(s)),
        Err(SelectError::NoAliveSite) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Plans where a group runs.
///
/// Candidate sites are evaluated as if the unit being placed had already
/// joined their waiting queue.
pub fn schedule_group(
    group: &JobGroup,
    sites: &[SiteState],
    network: &NetworkMatrix,
    selector: &SiteSelector,
    subgroup_size: usize,
    destination: &SiteId,
) -> Result<GroupPlacement, BulkError> {
    let representative = group.jobs.first().ok_or(BulkError::EmptyGroup(group.id))?;
    if !sites.iter().any(|s| s.alive) {
        return Err(BulkError::NoAliveSite);
    }
    let size = group.len();
    let service = representative.service_time;
    let none = BTreeMap::new();

    let single = select_or_none(selector, representative, &with_pending(sites, &none, size, size), network)?
        .map(|site| {
            let assignments = vec![Assignment { subgroup: 0, site, jobs: size }];
            predicted_makespan(&assignments, sites, service).map(|m| (assignments, m))
        })
        .transpose()?;

    let subgroups = partition(group, subgroup_size);
    let split = if subgroups.len() > 1 {
        let mut pending: BTreeMap<SiteId, usize> = BTreeMap::new();
        let mut chosen: Vec<SiteId> = Vec::new();
        let mut feasible = true;
        for sub in &subgroups {
            let snapshot = with_pending(sites, &pending, sub.len(), sub.len());
            match select_or_none(selector, &sub.jobs[0], &snapshot, network)? {
                Some(site) => {
                    *pending.entry(site.clone()).or_default() += sub.len();
                    if !chosen.contains(&site) {
                        chosen.push(site);
                    }
                }
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible {
            let chosen_sites: Vec<&SiteState> = chosen
                .iter()
                .map(|id| sites.iter().find(|s| &s.id == id).expect("selected from sites"))
                .collect();
            let weights: Vec<u32> = chosen_sites.iter().map(|s| s.cpu_count).collect();
            let caps: Vec<usize> = chosen_sites.iter().map(|s| cap(s)).collect();
            let counts = proportional_split(size, &weights, &caps);
            let assignments: Vec<Assignment> = chosen
                .into_iter()
                .zip(counts)
                .filter(|(_, n)| *n > 0)
                .enumerate()
                .map(|(i, (site, jobs))| Assignment { subgroup: i, site, jobs })
                .collect();
            let m = predicted_makespan(&assignments, sites, service)?;
            Some((assignments, m))
        } else {
            None
        }
    } else {
        None
    };

    let (assignments, predicted) = match (single, split) {
        (Some(s), Some(p)) => {
            if p.1 < s.1 {
                p
            } else {
                s
            }
        }
        (Some(s), None) => s,
        (None, Some(p)) => p,
        (None, None) => return Err(BulkError::CapacityExceeded { group: group.id, size }),
    };
    Ok(GroupPlacement {
        group: group.id,
        assignments,
        predicted_makespan: predicted,
        aggregation_destination: destination.clone(),
    })
}

/// Output manifest of one finished (or unfinished) subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupOutput {
    pub group: GroupId,
    pub subgroup: usize,
    pub site: SiteId,
    pub jobs: Vec<JobId>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedResult {
    pub group: GroupId,
    pub destination: SiteId,
    /// One entry per subgroup, ordered by subgroup index.
    pub manifest: Vec<SubgroupOutput>,
}

impl AggregatedResult {
    pub fn job_count(&self) -> usize {
        self.manifest.iter().map(|m| m.jobs.len()).sum()
    }
}

/// Collects every subgroup's output at the placement's destination.
pub fn aggregate(placement: &GroupPlacement, mut results: Vec<SubgroupOutput>) -> Result<AggregatedResult, BulkError> {
    if let Some(r) = results.iter().find(|r| r.group != placement.group) {
        return Err(BulkError::ForeignOutput {
            expected: placement.group,
            found: r.group,
        });
    }
    let missing: Vec<usize> = placement
        .assignments
        .iter()
        .map(|a| a.subgroup)
        .filter(|i| !results.iter().any(|r| r.subgroup == *i && r.completed))
        .collect();
    if !missing.is_empty() {
        return Err(BulkError::IncompleteGroup {
            group: placement.group,
            missing,
        });
    }
    results.sort_by_key(|r| r.subgroup);
    Ok(AggregatedResult {
        group: placement.group,
        destination: placement.aggregation_destination.clone(),
        manifest: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::NetworkEdge;

    fn group(id: u64, owner: &str, n: usize) -> JobGroup {
        let jobs = (0..n)
            .map(|i| Job::new(JobId(i as u64), owner.into(), "user".into(), 1, 1.0).unwrap())
            .collect();
        JobGroup::new(GroupId(id), owner.into(), jobs, 1).unwrap()
    }

    fn four_sites() -> Vec<SiteState> {
        [("A", 100), ("B", 200), ("C", 400), ("D", 600)]
            .into_iter()
            .map(|(id, cpus)| SiteState::new(id.into(), cpus, 1.0).unwrap())
            .collect()
    }

    fn uniform_net(ids: &[&str]) -> NetworkMatrix {
        let mut m = NetworkMatrix::new();
        for a in ids {
            for b in ids {
                if a != b {
                    m.insert(NetworkEdge::new((*a).into(), (*b).into(), 100.0, 0.01).unwrap());
                }
            }
        }
        m
    }

    fn a(site: &str, jobs: usize) -> Assignment {
        Assignment {
            subgroup: 0,
            site: site.into(),
            jobs,
        }
    }

    #[test]
    fn partition_examples() {
        let g = group(1, "u", 10_000);
        let p = partition(&g, 1000);
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|s| s.len() == 1000 && s.id == g.id && s.owner == g.owner));
        assert_eq!(partition(&g, 5000).len(), 2);
        let whole = partition(&g, 20_000);
        assert_eq!(whole, vec![g.clone()]);
        let odd = partition(&group(2, "u", 7), 3);
        assert_eq!(odd.iter().map(JobGroup::len).collect::<Vec<_>>(), [3, 3, 1]);
        let flat: Vec<JobId> = odd.iter().flat_map(|s| s.jobs.iter().map(|j| j.id)).collect();
        assert_eq!(flat, g.jobs[..7].iter().map(|j| j.id).collect::<Vec<_>>());
    }

    #[test]
    fn division_factor_sets_subgroup_size() {
        assert_eq!(subgroup_size_for(10_000, 2), 5000);
        assert_eq!(subgroup_size_for(10, 3), 4);
        assert_eq!(subgroup_size_for(0, 3), 1);
    }

    #[test]
    fn makespan_examples() {
        let sites = four_sites();
        let one = predicted_makespan(&[a("D", 10_000)], &sites, 1.0).unwrap();
        assert!((one - 16.666_666).abs() < 1e-3);
        let two = predicted_makespan(&[a("C", 4000), a("D", 6000)], &sites, 1.0).unwrap();
        assert!((two - 10.0).abs() < 1e-9);
        let four = predicted_makespan(&[a("A", 1000), a("B", 2000), a("C", 3000), a("D", 4000)], &sites, 1.0).unwrap();
        assert!((four - 10.0).abs() < 1e-9);
        assert!(matches!(
            predicted_makespan(&[a("Z", 1)], &sites, 1.0),
            Err(BulkError::UnknownSite(_))
        ));
    }

    #[test]
    fn small_group_stays_on_one_site() {
        let sites = vec![SiteState::new("S".into(), 100, 1.0).unwrap()];
        let g = group(1, "u", 10);
        let net = NetworkMatrix::new();
        let mut g = g;
        for j in &mut g.jobs {
            j.origin_site = "S".into();
        }
        let p = schedule_group(&g, &sites, &net, &SiteSelector::default(), 5, &"S".into()).unwrap();
        assert_eq!(p.assignments, vec![a("S", 10)]);
        assert!((p.predicted_makespan - 0.1).abs() < 1e-12);
    }

    #[test]
    fn split_beats_single_site() {
        let sites = four_sites();
        let net = uniform_net(&["A", "B", "C", "D", "user"]);
        let mut all = sites.clone();
        all.push(SiteState::new("user".into(), 1, 1.0).unwrap());
        let g = group(1, "u", 10_000);
        let sel = SiteSelector::default();
        let single = schedule_group(&g, &sites, &net, &sel, 20_000, &"user".into()).unwrap();
        assert_eq!(single.assignments, vec![a("D", 10_000)]);
        let split = schedule_group(&g, &sites, &net, &sel, 5000, &"user".into()).unwrap();
        let mut got: Vec<(String, usize)> = split.assignments.iter().map(|a| (a.site.0.clone(), a.jobs)).collect();
        got.sort();
        assert_eq!(got, [("C".to_owned(), 4000), ("D".to_owned(), 6000)]);
        assert!((split.predicted_makespan - 10.0).abs() < 1e-9);
        assert_eq!(split.total_jobs(), 10_000);
    }

    #[test]
    fn groups_are_never_merged() {
        let sites = four_sites();
        let net = uniform_net(&["A", "B", "C", "D", "user"]);
        let sel = SiteSelector::default();
        let g1 = group(1, "u", 100);
        let g2 = group(2, "v", 100);
        let p1 = schedule_group(&g1, &sites, &net, &sel, 50, &"user".into()).unwrap();
        let p2 = schedule_group(&g2, &sites, &net, &sel, 50, &"user".into()).unwrap();
        assert_eq!((p1.group, p2.group), (GroupId(1), GroupId(2)));
        assert_eq!(p1.total_jobs(), 100);
        assert_eq!(p2.total_jobs(), 100);
    }

    #[test]
    fn no_alive_site() {
        let mut sites = four_sites();
        for s in &mut sites {
            s.alive = false;
        }
        let net = uniform_net(&["A", "B", "C", "D", "user"]);
        assert_eq!(
            schedule_group(&group(1, "u", 10), &sites, &net, &SiteSelector::default(), 5, &"user".into()),
            Err(BulkError::NoAliveSite)
        );
    }

    #[test]
    fn capacity_limits() {
        let mut sites = four_sites();
        for s in &mut sites {
            s.max_jobs_per_user = Some(100);
        }
        let net = uniform_net(&["A", "B", "C", "D", "user"]);
        let sel = SiteSelector::default();
        assert!(matches!(
            schedule_group(&group(1, "u", 1000), &sites, &net, &sel, 100, &"user".into()),
            Err(BulkError::CapacityExceeded { .. })
        ));
        let p = schedule_group(&group(1, "u", 400), &sites, &net, &sel, 100, &"user".into()).unwrap();
        assert!(p.assignments.iter().all(|a| a.jobs <= 100));
        assert_eq!(p.total_jobs(), 400);
    }

    #[test]
    fn proportional_split_respects_caps() {
        assert_eq!(proportional_split(10_000, &[400, 600], &[usize::MAX; 2]), [4000, 6000]);
        assert_eq!(proportional_split(10, &[1, 1, 1], &[usize::MAX; 3]), [4, 3, 3]);
        assert_eq!(proportional_split(100, &[1, 9], &[100, 50]), [50, 50]);
    }

    #[test]
    fn split_jobs_preserves_order() {
        let g = group(1, "u", 5);
        let p = GroupPlacement {
            group: GroupId(1),
            assignments: vec![a("A", 2), a("B", 3)],
            predicted_makespan: 0.0,
            aggregation_destination: "A".into(),
        };
        let parts = p.split_jobs(g);
        let ids: Vec<Vec<u64>> = parts.iter().map(|(_, js)| js.iter().map(|j| j.id.0).collect()).collect();
        assert_eq!(ids, vec![vec![0, 1], vec![2, 3, 4]]);
    }

    fn output(sub: usize, done: bool) -> SubgroupOutput {
        SubgroupOutput {
            group: GroupId(1),
            subgroup: sub,
            site: "A".into(),
            jobs: vec![JobId(sub as u64)],
            completed: done,
        }
    }

    fn placement(n: usize) -> GroupPlacement {
        GroupPlacement {
            group: GroupId(1),
            assignments: (0..n)
                .map(|i| Assignment {
                    subgroup: i,
                    site: "A".into(),
                    jobs: 1,
                })
                .collect(),
            predicted_makespan: 1.0,
            aggregation_destination: "home".into(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&placement(1), vec![output(0, true)]).unwrap();
        assert_eq!(one.manifest, vec![output(0, true)]);
        assert_eq!(one.destination, SiteId::new("home"));

        let ten = aggregate(&placement(10), (0..10).rev().map(|i| output(i, true)).collect()).unwrap();
        assert_eq!(ten.manifest.len(), 10);
        assert_eq!(ten.group, GroupId(1));
        assert_eq!(ten.manifest[0].subgroup, 0);

        let missing = aggregate(&placement(3), vec![output(0, true), output(2, false)]);
        assert_eq!(
            missing,
            Err(BulkError::IncompleteGroup {
                group: GroupId(1),
                missing: vec![1, 2]
            })
        );
    }
}
