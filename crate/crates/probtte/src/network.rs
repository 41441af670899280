//! Road-network graph, trip validation support, and graph node contraction.
//!
//! Links (road segments) are the *nodes* of this graph; edges are topological
//! connections between consecutive segments. A contraction merges groups of
//! path-connected links into super-links and induces an affine transformation
//! of the model parameters (`L' = ML`, `H' = MH`, summed diagonal).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub type LinkId = u32;

/// Directed graph of road segments.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    link_count: usize,
    edges: Vec<(LinkId, LinkId)>,
    coords: Option<Vec<[f64; 2]>>,
}

impl RoadNetwork {
    /// Build a validated network. Edges are deduplicated and sorted.
    pub fn new(
        link_count: usize,
        mut edges: Vec<(LinkId, LinkId)>,
        coords: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        if link_count == 0 {
            return Err(Error::validation("network must have at least one link"));
        }
        for &(u, v) in &edges {
            if u as usize >= link_count || v as usize >= link_count {
                return Err(Error::validation(format!(
                    "edge ({u},{v}) references a link outside 0..{link_count}"
                )));
            }
        }
        if let Some(c) = &coords {
            if c.len() != link_count {
                return Err(Error::dimension(format!(
                    "coords has {} entries for {} links",
                    c.len(),
                    link_count
                )));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self { link_count, edges, coords })
    }

    pub fn link_count(&self) -> usize {
        self.link_count
    }

    pub fn edges(&self) -> &[(LinkId, LinkId)] {
        &self.edges
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn contains_link(&self, l: LinkId) -> bool {
        (l as usize) < self.link_count
    }

    /// Out-neighbor adjacency lists.
    pub fn adjacency(&self) -> Vec<Vec<LinkId>> {
        let mut adj = vec![Vec::new(); self.link_count];
        for &(u, v) in &self.edges {
            adj[u as usize].push(v);
        }
        adj
    }
}

/// Load a network from `<dir>/links.csv` (`link_id[,x,y]`) and
/// `<dir>/edges.csv` (`src,dst`).
pub fn load_network(dir: &Path) -> Result<RoadNetwork> {
    let links_path = dir.join("links.csv");
    let edges_path = dir.join("edges.csv");

    let mut rdr = csv::Reader::from_path(&links_path)
        .map_err(|e| Error::parse(format!("{}: {e}", links_path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("{}: {e}", links_path.display())))?
        .clone();
    let has_coords = match headers.len() {
        1 if &headers[0] == "link_id" => false,
        3 if &headers[0] == "link_id" && &headers[1] == "x" && &headers[2] == "y" => true,
        _ => {
            return Err(Error::parse(format!(
                "{}: expected header `link_id` or `link_id,x,y`",
                links_path.display()
            )))
        }
    };

    let mut ids: Vec<u64> = Vec::new();
    let mut coords: Vec<[f64; 2]> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(format!("{}: {e}", links_path.display())))?;
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::parse(format!("invalid link_id `{}`", &rec[0])))?;
        ids.push(id);
        if has_coords {
            let x: f64 = rec[1]
                .parse()
                .map_err(|_| Error::parse(format!("invalid x `{}`", &rec[1])))?;
            let y: f64 = rec[2]
                .parse()
                .map_err(|_| Error::parse(format!("invalid y `{}`", &rec[2])))?;
            coords.push([x, y]);
        }
    }
    if ids.is_empty() {
        return Err(Error::validation("links.csv contains no links"));
    }

    // Link ids must be dense 0..n-1 and unique.
    let n = ids.len();
    let mut seen = vec![false; n];
    for &id in &ids {
        if id >= n as u64 {
            return Err(Error::validation(format!(
                "link ids are not dense: id {id} with {n} links"
            )));
        }
        if seen[id as usize] {
            return Err(Error::validation(format!("duplicate link id {id}")));
        }
        seen[id as usize] = true;
    }
    let coords = if has_coords {
        // Reorder coords into id order.
        let mut c = vec![[0.0; 2]; n];
        for (row, &id) in ids.iter().enumerate() {
            c[id as usize] = coords[row];
        }
        Some(c)
    } else {
        None
    };

    let mut rdr = csv::Reader::from_path(&edges_path)
        .map_err(|e| Error::parse(format!("{}: {e}", edges_path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("{}: {e}", edges_path.display())))?;
    if headers.len() != 2 || &headers[0] != "src" || &headers[1] != "dst" {
        return Err(Error::parse(format!(
            "{}: expected header `src,dst`",
            edges_path.display()
        )));
    }
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(format!("{}: {e}", edges_path.display())))?;
        let u: u64 = rec[0]
            .parse()
            .map_err(|_| Error::parse(format!("invalid src `{}`", &rec[0])))?;
        let v: u64 = rec[1]
            .parse()
            .map_err(|_| Error::parse(format!("invalid dst `{}`", &rec[1])))?;
        if u >= n as u64 || v >= n as u64 {
            return Err(Error::validation(format!(
                "edge ({u},{v}) references a link outside 0..{n}"
            )));
        }
        edges.push((u as LinkId, v as LinkId));
    }
    RoadNetwork::new(n, edges, coords)
}

/// Write a network as `links.csv` + `edges.csv` under `dir`.
pub fn write_network(net: &RoadNetwork, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("links.csv"))
        .map_err(|e| Error::parse(e.to_string()))?;
    if let Some(coords) = net.coords() {
        w.write_record(["link_id", "x", "y"]).map_err(|e| Error::parse(e.to_string()))?;
        for (i, c) in coords.iter().enumerate() {
            w.write_record([i.to_string(), c[0].to_string(), c[1].to_string()])
                .map_err(|e| Error::parse(e.to_string()))?;
        }
    } else {
        w.write_record(["link_id"]).map_err(|e| Error::parse(e.to_string()))?;
        for i in 0..net.link_count() {
            w.write_record([i.to_string()]).map_err(|e| Error::parse(e.to_string()))?;
        }
    }
    w.flush()?;

    let mut w =
        csv::Writer::from_path(dir.join("edges.csv")).map_err(|e| Error::parse(e.to_string()))?;
    w.write_record(["src", "dst"]).map_err(|e| Error::parse(e.to_string()))?;
    for &(u, v) in net.edges() {
        w.write_record([u.to_string(), v.to_string()])
            .map_err(|e| Error::parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Partition of the links of a network into contraction groups.
///
/// Equivalent to a binary mapping matrix `M` with one 1 per column and at
/// least one per row; group `g` is row `g` of `M`.
#[derive(Debug, Clone)]
pub struct ContractionMap {
    groups: Vec<Vec<LinkId>>,
    source_links: usize,
}

impl ContractionMap {
    /// Build from groups; validates that the groups partition `0..source_links`.
    /// Path-connectivity is checked against a network in [`contract`].
    pub fn new(groups: Vec<Vec<LinkId>>, source_links: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::validation("contraction map has no groups"));
        }
        let mut owner = vec![usize::MAX; source_links];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::validation(format!("group {g} is empty")));
            }
            for &l in members {
                let li = l as usize;
                if li >= source_links {
                    return Err(Error::validation(format!(
                        "group {g} contains unknown link {l}"
                    )));
                }
                if owner[li] != usize::MAX {
                    return Err(Error::validation(format!(
                        "link {l} appears in groups {} and {g}",
                        owner[li]
                    )));
                }
                owner[li] = g;
            }
        }
        if let Some(l) = owner.iter().position(|&g| g == usize::MAX) {
            return Err(Error::validation(format!(
                "link {l} is not covered by any group"
            )));
        }
        Ok(Self { groups, source_links })
    }

    /// The identity partition: every link its own group.
    pub fn identity(source_links: usize) -> Self {
        Self {
            groups: (0..source_links as LinkId).map(|l| vec![l]).collect(),
            source_links,
        }
    }

    pub fn groups(&self) -> &[Vec<LinkId>] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn source_links(&self) -> usize {
        self.source_links
    }

    /// group id for each source link.
    pub fn group_of(&self) -> Vec<u32> {
        let mut owner = vec![0u32; self.source_links];
        for (g, members) in self.groups.iter().enumerate() {
            for &l in members {
                owner[l as usize] = g as u32;
            }
        }
        owner
    }

    /// Each group must form a directed path in the network: its members can
    /// be ordered `l_1, ..., l_g` with an edge `l_i -> l_{i+1}` for every
    /// step, no branching and no cycle.
    fn check_paths(&self, net: &RoadNetwork) -> Result<()> {
        if net.link_count() != self.source_links {
            return Err(Error::dimension(format!(
                "map covers {} links, network has {}",
                self.source_links,
                net.link_count()
            )));
        }
        let owner = self.group_of();
        let mut within: HashMap<u32, BTreeSet<(LinkId, LinkId)>> = HashMap::new();
        for &(u, v) in net.edges() {
            if u != v && owner[u as usize] == owner[v as usize] {
                within.entry(owner[u as usize]).or_default().insert((u, v));
            }
        }
        for (g, members) in self.groups.iter().enumerate() {
            if members.len() == 1 {
                continue;
            }
            let edges = within.get(&(g as u32)).cloned().unwrap_or_default();
            let mut succ: HashMap<LinkId, LinkId> = HashMap::new();
            let mut in_deg: HashMap<LinkId, usize> = members.iter().map(|&l| (l, 0)).collect();
            let mut valid = true;
            for &(u, v) in &edges {
                if succ.insert(u, v).is_some() {
                    valid = false; // branches
                }
                *in_deg.get_mut(&v).unwrap() += 1;
            }
            valid &= in_deg.values().all(|&d| d <= 1);
            let mut starts = members.iter().filter(|l| in_deg[l] == 0);
            let start = starts.next();
            valid &= start.is_some() && starts.next().is_none();
            if valid {
                // Follow the unique successor chain; it must visit everyone.
                let mut visited = 1usize;
                let mut here = *start.unwrap();
                while let Some(&next) = succ.get(&here) {
                    visited += 1;
                    here = next;
                }
                valid = visited == members.len();
            }
            if !valid {
                return Err(Error::validation(format!(
                    "group {g} does not form a directed path in the network"
                )));
            }
        }
        Ok(())
    }
}

/// Contract a network: one node per group, an edge between two groups iff
/// some original edge crosses them. Self-loops are dropped.
pub fn contract(net: &RoadNetwork, map: &ContractionMap) -> Result<RoadNetwork> {
    map.check_paths(net)?;
    let owner = map.group_of();
    let mut edges: BTreeSet<(LinkId, LinkId)> = BTreeSet::new();
    for &(u, v) in net.edges() {
        let (gu, gv) = (owner[u as usize], owner[v as usize]);
        if gu != gv {
            edges.insert((gu, gv));
        }
    }
    let coords = net.coords().map(|c| {
        map.groups()
            .iter()
            .map(|members| {
                let n = members.len() as f64;
                let (sx, sy) = members
                    .iter()
                    .fold((0.0, 0.0), |(sx, sy), &l| {
                        (sx + c[l as usize][0], sy + c[l as usize][1])
                    });
                [sx / n, sy / n]
            })
            .collect()
    });
    RoadNetwork::new(map.group_count(), edges.into_iter().collect(), coords)
}

/// Transform model parameters onto the contracted network: `L' = ML`,
/// `H' = MH`, and the diagonal aggregated per group (`M D Mᵀ`, which stays
/// diagonal because groups are disjoint).
///
/// The aggregated diagonal is carried as an explicit override: the softplus
/// link between `H` and `D` is nonlinear, so `softplus(H' w_d)` would not
/// reproduce the summed diagonal.
pub fn apply_contraction(params: &ModelParams, map: &ContractionMap) -> Result<ModelParams> {
    if params.link_count() != map.source_links() {
        return Err(Error::dimension(format!(
            "params cover {} links, map covers {}",
            params.link_count(),
            map.source_links()
        )));
    }
    params.contract_rows(map.groups())
}
