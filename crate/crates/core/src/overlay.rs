//! RootGrid/SubGrid peer-to-peer topology as message-passing state machines.
//!
//! Every SubGrid has one RootGrid node that keeps the registry of its
//! members and replicates it to a standby. Roots talk to each other; members
//! talk only to their root. Failure detection is an environment oracle that
//! notifies the affected nodes asynchronously.
//!
//! Messages travel through per-(sender, receiver) FIFO channels. Channels are
//! drained one message at a time, in any order the driver chooses, which lets
//! [`model_check`] explore every interleaving on small networks.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubGridId(pub u32);

impl fmt::Display for SubGridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sg{}", self.0)
    }
}

/// A real number with a total order, so overlay states can be hashed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(pub f64);

impl PartialEq for Score {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0).is_eq()
    }
}

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Hash for Score {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    RootGrid,
    Standby,
    Member,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node: NodeId,
    pub role: Role,
    pub subgrid: SubGridId,
    pub availability: Score,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegistryTable {
    /// Number of failovers the SubGrid has been through.
    pub epoch: u32,
    pub entries: BTreeMap<NodeId, NodeRecord>,
}

impl RegistryTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.entries.contains_key(&node)
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.entries.values()
    }

    pub fn standby(&self) -> Option<NodeId> {
        self.records().find(|r| r.role == Role::Standby).map(|r| r.node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Message {
    Join { availability: Score },
    JoinAck { role: Role, subgrid: SubGridId, root: NodeId, epoch: u32 },
    RegistryReplicate(RegistryTable),
    SetRole(Role),
    Promote { subgrid: SubGridId, root: NodeId, epoch: u32 },
    /// Detector notice to a standby: its root is down.
    RootFailed { failed: NodeId },
    /// Detector notice to a root: one of its nodes is down.
    PeerFailed { node: NodeId },
    /// Detector notice to a member whose SubGrid cannot fail over.
    Rejoin { failed_root: NodeId, subgrid: SubGridId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Detector,
    Node(NodeId),
}

/// Role class of a message endpoint, recorded to audit who talks to whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeEnd {
    Detector,
    Root,
    Member,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OverlayError {
    #[error("node {0:?} has already joined")]
    DuplicateJoin(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is down")]
    NodeDown(NodeId),
    #[error("node {0} is not a RootGrid")]
    NotRoot(NodeId),
    #[error("SubGrid {0} has no live root")]
    NoRoot(SubGridId),
    #[error("SubGrid {0} has a single node and no standby")]
    NoStandby(SubGridId),
    #[error("no message pending from {0:?} to {1}")]
    NothingPending(Endpoint, NodeId),
    #[error("messages still in flight after {0} deliveries")]
    NoQuiescence(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub name: String,
    pub availability: f64,
    /// CPUs the site brings; at or above the SubGrid threshold it founds its own SubGrid.
    pub resources: u32,
    /// Network cost from this node to other nodes, by name. Missing entries are unreachable.
    pub costs_to: BTreeMap<String, f64>,
}

impl JoinRequest {
    pub fn new(name: impl Into<String>, availability: f64, resources: u32) -> Self {
        Self {
            name: name.into(),
            availability,
            resources,
            costs_to: BTreeMap::new(),
        }
    }

    pub fn with_cost(mut self, to: impl Into<String>, cost: f64) -> Self {
        self.costs_to.insert(to.into(), cost);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub name: Rc<str>,
    pub availability: Score,
    pub resources: u32,
    costs_to: Rc<BTreeMap<String, Score>>,
    pub alive: bool,
    pub role: Option<Role>,
    pub subgrid: Option<SubGridId>,
    pub root: Option<NodeId>,
    /// Epoch of the root this node follows.
    pub epoch: u32,
    /// Authoritative table, held by roots.
    pub registry: Option<RegistryTable>,
    /// Copy of the root's table, held by the standby.
    pub replica: Option<RegistryTable>,
    /// Root a pending join was sent to.
    pub joining: Option<NodeId>,
    /// SubGrids this node left after they lost both root and standby.
    pub abandoned: BTreeSet<SubGridId>,
}

// Name, availability, resources and costs are fixed at join and follow
// from the id, so hashing skips them.
impl Hash for Node {
    fn hash<H: Hasher>(&self, state: &mut H) {
        (self.id, self.alive, self.role, self.subgrid, self.root, self.epoch).hash(state);
        (&self.registry, &self.replica, self.joining, &self.abandoned).hash(state);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OverlayConfig {
    /// Sites with at least this many CPUs found their own SubGrid.
    pub subgrid_min: u32,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self { subgrid_min: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Overlay {
    config: OverlayConfig,
    nodes: BTreeMap<NodeId, Node>,
    channels: BTreeMap<(Endpoint, NodeId), VecDeque<Message>>,
    /// Discovery service: live RootGrids.
    directory: BTreeSet<NodeId>,
    /// Nodes the detector has seen fail.
    failed: BTreeSet<NodeId>,
    edges: BTreeSet<(EdgeEnd, EdgeEnd)>,
    next_node: u32,
    next_subgrid: u32,
}

impl Overlay {
    pub fn new(config: OverlayConfig) -> Self {
        Self {
            config,
            nodes: BTreeMap::new(),
            channels: BTreeMap::new(),
            directory: BTreeSet::new(),
            failed: BTreeSet::new(),
            edges: BTreeSet::new(),
            next_node: 0,
            next_subgrid: 1,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.nodes.values().find(|n| n.alive && &*n.name == name)
    }

    pub fn crashes(&self) -> usize {
        self.failed.len()
    }

    /// Endpoint pairs that have exchanged at least one message.
    pub fn edges(&self) -> &BTreeSet<(EdgeEnd, EdgeEnd)> {
        &self.edges
    }

    pub fn is_quiescent(&self) -> bool {
        self.channels.is_empty()
    }

    /// Channels with a deliverable head message.
    pub fn pending(&self) -> Vec<(Endpoint, NodeId)> {
        self.channels.keys().copied().collect()
    }

    pub fn in_flight(&self) -> usize {
        self.channels.values().map(VecDeque::len).sum()
    }

    /// The live root of `subgrid`.
    pub fn root_of(&self, subgrid: SubGridId) -> Option<NodeId> {
        self.nodes
            .values()
            .find(|n| n.alive && n.role == Some(Role::RootGrid) && n.subgrid == Some(subgrid))
            .map(|n| n.id)
    }

    pub fn subgrids(&self) -> BTreeSet<SubGridId> {
        self.nodes.values().filter(|n| n.alive).filter_map(|n| n.subgrid).collect()
    }

    /// Starts the join protocol for a new node and returns its id.
    pub fn join(&mut self, request: JoinRequest) -> Result<NodeId, OverlayError> {
        if self.node_by_name(&request.name).is_some() {
            return Err(OverlayError::DuplicateJoin(request.name));
        }
        let id = NodeId(self.next_node);
        self.next_node += 1;
        self.nodes.insert(
            id,
            Node {
                id,
                name: request.name.into(),
                availability: Score(request.availability),
                resources: request.resources,
                costs_to: Rc::new(request.costs_to.into_iter().map(|(k, v)| (k, Score(v))).collect()),
                alive: true,
                role: None,
                subgrid: None,
                root: None,
                epoch: 0,
                registry: None,
                replica: None,
                joining: None,
                abandoned: BTreeSet::new(),
            },
        );
        self.start_join(id);
        Ok(id)
    }

    /// Live roots other than `requester`.
    pub fn peer_list(&self, requester: NodeId) -> Result<Vec<NodeId>, OverlayError> {
        let node = self.nodes.get(&requester).ok_or(OverlayError::UnknownNode(requester))?;
        if node.role != Some(Role::RootGrid) || !node.alive {
            return Err(OverlayError::NotRoot(requester));
        }
        Ok(self.directory.iter().copied().filter(|&r| r != requester).collect())
    }

    /// Crashes a node and queues the detector's notices.
    pub fn crash(&mut self, id: NodeId) -> Result<(), OverlayError> {
        let node = self.nodes.get_mut(&id).ok_or(OverlayError::UnknownNode(id))?;
        if !node.alive {
            return Err(OverlayError::NodeDown(id));
        }
        node.alive = false;
        let node = node.clone();
        self.failed.insert(id);
        self.directory.remove(&id);
        match node.role {
            Some(Role::RootGrid) => {
                let table = node.registry.unwrap_or_default();
                match table.standby().filter(|s| self.is_alive(*s)) {
                    Some(standby) => self.notify(standby, Message::RootFailed { failed: id }),
                    None => self.orphan(&table, id),
                }
            }
            Some(Role::Standby) | Some(Role::Member) | None => {
                let mut holders: BTreeSet<NodeId> = self
                    .directory
                    .iter()
                    .copied()
                    .filter(|r| self.nodes[r].registry.as_ref().is_some_and(|t| t.contains(id)))
                    .collect();
                holders.extend(node.joining.filter(|&r| self.is_alive(r)));
                for r in holders {
                    self.notify(r, Message::PeerFailed { node: id });
                }
                if let (Some(Role::Standby), Some(replica)) = (node.role, &node.replica) {
                    let root = replica.records().find(|r| r.role == Role::RootGrid).map(|r| r.node);
                    if let Some(r) = root.filter(|&r| !self.is_alive(r)) {
                        // Failover was pending on this node; nobody can take over.
                        self.orphan(replica, r);
                    }
                }
            }
        }
        Ok(())
    }

    /// Crashes the root of `subgrid` and runs the failover to quiescence.
    pub fn fail_root(&mut self, subgrid: SubGridId) -> Result<NodeId, OverlayError> {
        let root = self.root_of(subgrid).ok_or(OverlayError::NoRoot(subgrid))?;
        let table_len = self.nodes[&root].registry.as_ref().map_or(0, RegistryTable::len);
        if table_len < 2 {
            return Err(OverlayError::NoStandby(subgrid));
        }
        self.crash(root)?;
        self.run_to_quiescence(10_000)?;
        self.root_of(subgrid).ok_or(OverlayError::NoRoot(subgrid))
    }

    /// Delivers the head message of one channel.
    pub fn deliver(&mut self, from: Endpoint, to: NodeId) -> Result<(), OverlayError> {
        let key = (from, to);
        let queue = self.channels.get_mut(&key).ok_or(OverlayError::NothingPending(from, to))?;
        let msg = queue.pop_front().expect("channels are never left empty");
        if queue.is_empty() {
            self.channels.remove(&key);
        }
        if !self.is_alive(to) {
            if let (Message::Join { .. }, Endpoint::Node(joiner)) = (&msg, from) {
                if self.is_alive(joiner) {
                    self.start_join(joiner);
                }
            }
            return Ok(());
        }
        self.handle(from, to, msg);
        Ok(())
    }

    /// Delivers pending messages in channel order until none remain.
    pub fn run_to_quiescence(&mut self, limit: usize) -> Result<usize, OverlayError> {
        let mut delivered = 0;
        while let Some(&(from, to)) = self.channels.keys().next() {
            if delivered == limit {
                return Err(OverlayError::NoQuiescence(limit));
            }
            self.deliver(from, to)?;
            delivered += 1;
        }
        Ok(delivered)
    }

    fn is_alive(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.alive)
    }

    fn end_of(&self, endpoint: Endpoint) -> EdgeEnd {
        match endpoint {
            Endpoint::Detector => EdgeEnd::Detector,
            Endpoint::Node(id) => match self.nodes.get(&id).and_then(|n| n.role) {
                Some(Role::RootGrid) => EdgeEnd::Root,
                _ => EdgeEnd::Member,
            },
        }
    }

    fn record_edge(&mut self, from: Endpoint, to: NodeId) {
        let edge = (self.end_of(from), self.end_of(Endpoint::Node(to)));
        self.edges.insert(edge);
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Message) {
        self.record_edge(Endpoint::Node(from), to);
        self.channels.entry((Endpoint::Node(from), to)).or_default().push_back(msg);
    }

    fn notify(&mut self, to: NodeId, msg: Message) {
        self.record_edge(Endpoint::Detector, to);
        self.channels.entry((Endpoint::Detector, to)).or_default().push_back(msg);
    }

    /// Delivers within the current step; used for replication.
    fn send_now(&mut self, from: NodeId, to: NodeId, msg: Message) {
        self.record_edge(Endpoint::Node(from), to);
        if self.is_alive(to) {
            self.handle(Endpoint::Node(from), to, msg);
        }
    }

    fn orphan(&mut self, table: &RegistryTable, failed_root: NodeId) {
        let Some(subgrid) = table.records().next().map(|r| r.subgrid) else { return };
        let members: Vec<NodeId> = table
            .records()
            .map(|r| r.node)
            .filter(|&m| m != failed_root && self.is_alive(m))
            .collect();
        for m in members {
            self.notify(m, Message::Rejoin { failed_root, subgrid });
        }
    }

    fn start_join(&mut self, id: NodeId) {
        let node = &self.nodes[&id];
        let nearest = self
            .directory
            .iter()
            .filter(|&&r| r != id)
            .map(|&r| {
                let cost = node.costs_to.get(&*self.nodes[&r].name).copied().unwrap_or(Score(f64::INFINITY));
                (cost, r)
            })
            .min();
        let founds = node.resources >= self.config.subgrid_min;
        match nearest {
            Some((_, root)) if !founds => {
                let msg = Message::Join {
                    availability: node.availability,
                };
                self.nodes.get_mut(&id).expect("node exists").joining = Some(root);
                self.send(id, root, msg);
            }
            _ => self.found_subgrid(id),
        }
    }

    fn found_subgrid(&mut self, id: NodeId) {
        let subgrid = SubGridId(self.next_subgrid);
        self.next_subgrid += 1;
        let node = self.nodes.get_mut(&id).expect("node exists");
        let mut table = RegistryTable::default();
        table.entries.insert(
            id,
            NodeRecord {
                node: id,
                role: Role::RootGrid,
                subgrid,
                availability: node.availability,
            },
        );
        node.role = Some(Role::RootGrid);
        node.subgrid = Some(subgrid);
        node.root = Some(id);
        node.epoch = 0;
        node.registry = Some(table);
        node.replica = None;
        node.joining = None;
        self.directory.insert(id);
    }

    fn handle(&mut self, from: Endpoint, to: NodeId, msg: Message) {
        match msg {
            Message::Join { availability } => {
                let Endpoint::Node(joiner) = from else { return };
                if self.failed.contains(&joiner) || self.nodes[&to].role != Some(Role::RootGrid) {
                    return;
                }
                let subgrid = self.nodes[&to].subgrid.expect("roots have a SubGrid");
                self.registry_mut(to).entries.insert(
                    joiner,
                    NodeRecord {
                        node: joiner,
                        role: Role::Member,
                        subgrid,
                        availability,
                    },
                );
                self.elect_standby(to);
                let role = self.nodes[&to].registry.as_ref().expect("root registry").entries[&joiner].role;
                let epoch = self.nodes[&to].epoch;
                self.send(to, joiner, Message::JoinAck { role, subgrid, root: to, epoch });
            }
            Message::JoinAck { role, subgrid, root, epoch } => {
                let node = self.nodes.get_mut(&to).expect("node exists");
                if node.joining != Some(root) {
                    return;
                }
                node.joining = None;
                node.subgrid = Some(subgrid);
                node.root = Some(root);
                node.epoch = epoch;
                // A role set directly by the root is newer than the ack.
                node.role.get_or_insert(role);
            }
            Message::RegistryReplicate(table) => {
                self.nodes.get_mut(&to).expect("node exists").replica = Some(table);
            }
            Message::SetRole(role) => {
                let node = self.nodes.get_mut(&to).expect("node exists");
                node.role = Some(role);
                if role != Role::Standby {
                    node.replica = None;
                }
            }
            Message::Promote { subgrid, root, epoch } => {
                let current = self.in_subgrid(to, subgrid);
                let node = self.nodes.get_mut(&to).expect("node exists");
                // Announcements from different roots may overtake each other.
                if node.role == Some(Role::RootGrid) || !current || epoch <= node.epoch {
                    return;
                }
                node.epoch = epoch;
                // Also settles a join whose ack from the failed root is still in flight.
                node.subgrid = Some(subgrid);
                node.root = Some(root);
                node.joining = None;
                node.role.get_or_insert(Role::Member);
            }
            Message::RootFailed { failed } => self.promote(to, failed),
            Message::PeerFailed { node } => {
                if self.nodes[&to].role != Some(Role::RootGrid) {
                    return;
                }
                if self.registry_mut(to).entries.remove(&node).is_some() {
                    self.elect_standby(to);
                }
            }
            Message::Rejoin { failed_root, subgrid } => {
                let follows = self.in_subgrid(to, subgrid) || self.nodes[&to].joining == Some(failed_root);
                let node = self.nodes.get_mut(&to).expect("node exists");
                if !follows || node.role == Some(Role::RootGrid) {
                    return;
                }
                node.abandoned.insert(subgrid);
                node.role = None;
                node.joining = None;
                node.epoch = 0;
                node.subgrid = None;
                node.root = None;
                node.replica = None;
                self.start_join(to);
            }
        }
    }

    /// Whether `id` belongs to `subgrid` or is joining it, and has not left it.
    fn in_subgrid(&self, id: NodeId, subgrid: SubGridId) -> bool {
        let node = &self.nodes[&id];
        if node.abandoned.contains(&subgrid) {
            return false;
        }
        node.subgrid == Some(subgrid) || node.joining.is_some_and(|r| self.nodes[&r].subgrid == Some(subgrid))
    }

    fn registry_mut(&mut self, root: NodeId) -> &mut RegistryTable {
        self.nodes
            .get_mut(&root)
            .and_then(|n| n.registry.as_mut())
            .expect("roots hold a registry")
    }

    /// Standby takes over with its replica, minus nodes known to be down.
    fn promote(&mut self, standby: NodeId, failed_root: NodeId) {
        let node = self.nodes.get_mut(&standby).expect("node exists");
        // The replica names the root even when the standby has not yet seen
        // its join acknowledged or the root's own promotion announced.
        let follows = node
            .replica
            .as_ref()
            .and_then(|t| t.entries.get(&failed_root))
            .is_some_and(|r| r.role == Role::RootGrid);
        if node.role != Some(Role::Standby) || !follows {
            return;
        }
        let Some(mut table) = node.replica.take() else { return };
        table.entries.retain(|id, _| !self.failed.contains(id));
        table.epoch += 1;
        let epoch = table.epoch;
        let Some(own) = table.entries.get_mut(&standby) else { return };
        own.role = Role::RootGrid;
        let subgrid = own.subgrid;
        node.role = Some(Role::RootGrid);
        node.root = Some(standby);
        node.subgrid = Some(subgrid);
        node.joining = None;
        node.epoch = epoch;
        node.registry = Some(table);
        self.directory.insert(standby);
        self.elect_standby(standby);
        let members: Vec<NodeId> = self.nodes[&standby]
            .registry
            .as_ref()
            .expect("just set")
            .entries
            .keys()
            .copied()
            .filter(|&m| m != standby)
            .collect();
        for m in members {
            self.send(standby, m, Message::Promote { subgrid, root: standby, epoch });
        }
    }

    /// Picks the standby (highest availability, then lowest id) and replicates to it.
    fn elect_standby(&mut self, root: NodeId) {
        let table = self.nodes[&root].registry.clone().expect("roots hold a registry");
        let current = table.standby();
        let best = table
            .records()
            .filter(|r| r.node != root && !self.failed.contains(&r.node))
            .min_by(|a, b| b.availability.cmp(&a.availability).then(a.node.cmp(&b.node)))
            .map(|r| r.node);
        if current != best {
            if let Some(old) = current {
                if let Some(rec) = self.registry_mut(root).entries.get_mut(&old) {
                    rec.role = Role::Member;
                }
                self.send_now(root, old, Message::SetRole(Role::Member));
            }
            if let Some(new) = best {
                self.registry_mut(root).entries.get_mut(&new).expect("candidate from table").role = Role::Standby;
                self.send_now(root, new, Message::SetRole(Role::Standby));
            }
        }
        if let Some(standby) = best {
            let table = self.nodes[&root].registry.clone().expect("roots hold a registry");
            self.send_now(root, standby, Message::RegistryReplicate(table));
        }
    }

    /// Invariants that hold at every step: at most one live root per SubGrid
    /// and no member-to-member traffic.
    pub fn check_safety(&self) -> Result<(), String> {
        let mut roots: BTreeMap<SubGridId, NodeId> = BTreeMap::new();
        for n in self.nodes.values().filter(|n| n.alive && n.role == Some(Role::RootGrid)) {
            let sg = n.subgrid.ok_or_else(|| format!("root {} has no SubGrid", n.id))?;
            if let Some(other) = roots.insert(sg, n.id) {
                return Err(format!("SubGrid {sg} has two roots: {other} and {}", n.id));
            }
        }
        if self.edges.contains(&(EdgeEnd::Member, EdgeEnd::Member)) {
            return Err("a member sent a message to another member".into());
        }
        Ok(())
    }

    /// Invariants that hold once no message is in flight.
    pub fn check_quiescent(&self) -> Result<(), String> {
        self.check_safety()?;
        for sg in self.subgrids() {
            let root = self.root_of(sg).ok_or_else(|| format!("SubGrid {sg} has no root"))?;
            let table = self.nodes[&root].registry.as_ref().ok_or("root without registry")?;
            let members: BTreeSet<NodeId> = self
                .nodes
                .values()
                .filter(|n| n.alive && n.subgrid == Some(sg))
                .map(|n| n.id)
                .collect();
            let listed: BTreeSet<NodeId> = table.entries.keys().copied().collect();
            if members != listed {
                return Err(format!("SubGrid {sg}: registry {listed:?} but live members {members:?}"));
            }
            let expected_standby = table
                .records()
                .filter(|r| r.node != root)
                .min_by(|a, b| b.availability.cmp(&a.availability).then(a.node.cmp(&b.node)))
                .map(|r| r.node);
            if table.standby() != expected_standby {
                return Err(format!("SubGrid {sg}: standby {:?}, expected {expected_standby:?}", table.standby()));
            }
            for rec in table.records() {
                let n = &self.nodes[&rec.node];
                if n.role != Some(rec.role) || n.root != Some(root) {
                    return Err(format!("node {} disagrees with its registry entry", n.id));
                }
            }
            if let Some(s) = expected_standby {
                if self.nodes[&s].replica.as_ref() != Some(table) {
                    return Err(format!("SubGrid {sg}: standby {s} replica differs from root table"));
                }
            }
        }
        if let Some(n) = self.nodes.values().find(|n| n.alive && n.subgrid.is_none()) {
            return Err(format!("node {} belongs to no SubGrid", n.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckConfig {
    pub overlay: OverlayConfig,
    /// Nodes that join, in this order, at any point of the exploration.
    pub joins: Vec<JoinRequest>,
    pub max_crashes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelCheckReport {
    pub states: usize,
    pub quiescent_states: usize,
    pub failovers: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{violation} after {trace:?}")]
pub struct Violation {
    pub violation: String,
    pub trace: Vec<String>,
}

/// Explores every interleaving of joins, message deliveries and up to
/// `max_crashes` crashes, checking safety in every state and the full
/// invariants in every quiescent state.
///
/// Visited states are remembered by a 128-bit fingerprint.
pub fn model_check(config: &ModelCheckConfig) -> Result<ModelCheckReport, Violation> {
    let mut seen: HashSet<u128> = HashSet::new();
    let root = (Overlay::new(config.overlay), 0usize);
    seen.insert(fingerprint(&root));
    let mut stack: Vec<(Overlay, usize, Option<Rc<Step>>)> = vec![(root.0, root.1, None)];
    let mut report = ModelCheckReport::default();
    while let Some((state, next_join, trace)) = stack.pop() {
        report.states += 1;
        let fail = |violation: String| Violation {
            violation,
            trace: Step::labels(&trace),
        };
        state.check_safety().map_err(fail)?;
        if state.is_quiescent() && next_join == config.joins.len() {
            state.check_quiescent().map_err(fail)?;
            report.quiescent_states += 1;
            let failed_over = state.nodes().any(|n| {
                !n.alive && n.role == Some(Role::RootGrid) && n.subgrid.is_some_and(|sg| state.root_of(sg).is_some())
            });
            if failed_over {
                report.failovers += 1;
            }
        }
        let mut successors: Vec<(Overlay, usize, String)> = Vec::new();
        if let Some(req) = config.joins.get(next_join) {
            let mut s = state.clone();
            s.join(req.clone()).map_err(|e| fail(e.to_string()))?;
            successors.push((s, next_join + 1, format!("join {}", req.name)));
        }
        for (from, to) in state.pending() {
            let mut s = state.clone();
            s.deliver(from, to).map_err(|e| fail(e.to_string()))?;
            successors.push((s, next_join, format!("deliver {from:?}->{to}")));
        }
        if state.crashes() < config.max_crashes {
            for id in state.nodes().filter(|n| n.alive).map(|n| n.id) {
                let mut s = state.clone();
                s.crash(id).map_err(|e| fail(e.to_string()))?;
                successors.push((s, next_join, format!("crash {id}")));
            }
        }
        for (s, j, label) in successors {
            let key = (s, j);
            if seen.insert(fingerprint(&key)) {
                let step = Rc::new(Step {
                    label,
                    parent: trace.clone(),
                });
                stack.push((key.0, key.1, Some(step)));
            }
        }
    }
    Ok(report)
}

struct Step {
    label: String,
    parent: Option<Rc<Step>>,
}

impl Step {
    fn labels(tail: &Option<Rc<Step>>) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = tail.clone();
        while let Some(step) = cur {
            out.push(step.label.clone());
            cur = step.parent.clone();
        }
        out.reverse();
        out
    }
}

fn fingerprint<T: Hash>(value: &T) -> u128 {
    let mut lo = DefaultHasher::new();
    value.hash(&mut lo);
    let mut hi = DefaultHasher::new();
    hi.write_u64(0x9e37_79b9_7f4a_7c15);
    value.hash(&mut hi);
    (u128::from(hi.finish()) << 64) | u128::from(lo.finish())
}
