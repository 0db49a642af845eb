//! User-code bipartite graphs. Every user is linked to the discrete codes
//! assigned to them (one per quantization level, keyed by level so equal
//! indices at different levels stay distinct nodes), and embeddings are
//! smoothed over the graph with symmetric-normalized propagation: each hop
//! averages neighbors with coefficient 1/sqrt(deg_u * deg_c) and the final
//! embedding is the mean of all hop outputs including hop zero.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use serde::Serialize;

use crate::data::Channel;
use crate::quantizer::CodeAssignment;
use crate::tape::{Mat, SparseMat, Tape, Var};

#[derive(thiserror::Error, Debug)]
pub enum GraphError {
    #[error("user {0} appears more than once in the codes list")]
    DuplicateUser(usize),
    #[error("user id {0} out of range (have {1} users)")]
    UserOutOfRange(usize, usize),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Bipartite graph between users and the code nodes actually assigned to
/// at least one user. Code node ids are dense, in first-appearance order.
#[derive(Clone, Debug)]
pub struct CodeGraph {
    pub n_users: usize,
    /// Dense code id -> (level, codebook index).
    pub code_labels: Vec<(usize, usize)>,
    pub code_ids: BTreeMap<(usize, usize), usize>,
    pub user_adj: Vec<Vec<usize>>,
    pub code_adj: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GraphStats {
    pub users: usize,
    pub codes: usize,
    pub edges: usize,
    pub isolated_users: usize,
    pub max_user_degree: usize,
    pub max_code_degree: usize,
    pub avg_user_degree: f64,
    pub avg_code_degree: f64,
}

impl CodeGraph {
    pub fn n_codes(&self) -> usize {
        self.code_labels.len()
    }

    pub fn n_edges(&self) -> usize {
        self.user_adj.iter().map(|a| a.len()).sum()
    }

    pub fn stats(&self) -> GraphStats {
        let edges = self.n_edges();
        let isolated = self.user_adj.iter().filter(|a| a.is_empty()).count();
        GraphStats {
            users: self.n_users,
            codes: self.n_codes(),
            edges,
            isolated_users: isolated,
            max_user_degree: self.user_adj.iter().map(|a| a.len()).max().unwrap_or(0),
            max_code_degree: self.code_adj.iter().map(|a| a.len()).max().unwrap_or(0),
            avg_user_degree: if self.n_users == 0 {
                0.0
            } else {
                edges as f64 / self.n_users as f64
            },
            avg_code_degree: if self.n_codes() == 0 {
                0.0
            } else {
                edges as f64 / self.n_codes() as f64
            },
        }
    }

    /// The two halves of one propagation hop, as sparse operators:
    /// users-from-codes and codes-from-users, both carrying the
    /// 1/sqrt(deg_u * deg_c) edge weight.
    pub fn operators(&self) -> (SparseMat, SparseMat) {
        let mut u_from_c = SparseMat::new(self.n_users, self.n_codes());
        let mut c_from_u = SparseMat::new(self.n_codes(), self.n_users);
        for (u, adj) in self.user_adj.iter().enumerate() {
            let du = adj.len() as f64;
            for &c in adj {
                let dc = self.code_adj[c].len() as f64;
                let w = 1.0 / (du * dc).sqrt();
                u_from_c.push(u, c, w);
                c_from_u.push(c, u, w);
            }
        }
        (u_from_c, c_from_u)
    }
}

/// Builds the bipartite graph for one channel from exported code
/// assignments. Users absent from `codes` stay isolated; duplicate user
/// rows and repeated codes within a user abort.
pub fn build_code_graph(
    codes: &[CodeAssignment],
    n_users: usize,
    ch: Channel,
) -> Result<CodeGraph, GraphError> {
    let mut code_ids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut code_labels: Vec<(usize, usize)> = Vec::new();
    let mut user_adj = vec![Vec::new(); n_users];
    let mut code_adj: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; n_users];
    for a in codes {
        if a.user_id >= n_users {
            return Err(GraphError::UserOutOfRange(a.user_id, n_users));
        }
        if seen[a.user_id] {
            return Err(GraphError::DuplicateUser(a.user_id));
        }
        seen[a.user_id] = true;
        let seq = match ch {
            Channel::Search => &a.s,
            Channel::Rec => &a.r,
        };
        for (level, &index) in seq.iter().enumerate() {
            let cid = *code_ids.entry((level, index)).or_insert_with(|| {
                code_labels.push((level, index));
                code_adj.push(Vec::new());
                code_labels.len() - 1
            });
            user_adj[a.user_id].push(cid);
            code_adj[cid].push(a.user_id);
        }
    }
    Ok(CodeGraph { n_users, code_labels, code_ids, user_adj, code_adj })
}

/// Value-only propagation: `layers` hops, output = mean of hops 0..=layers.
/// `layers = 0` returns the inputs unchanged.
pub fn propagate_value(g: &CodeGraph, e_user: &Mat, e_code: &Mat, layers: usize) -> (Mat, Mat) {
    assert_eq!(e_user.rows, g.n_users);
    assert_eq!(e_code.rows, g.n_codes());
    let (ufc, cfu) = g.operators();
    let mut u_sum = e_user.clone();
    let mut c_sum = e_code.clone();
    let mut u_cur = e_user.clone();
    let mut c_cur = e_code.clone();
    for _ in 0..layers {
        let u_next = ufc.apply(&c_cur);
        let c_next = cfu.apply(&u_cur);
        u_sum.add_assign(&u_next);
        c_sum.add_assign(&c_next);
        u_cur = u_next;
        c_cur = c_next;
    }
    let s = 1.0 / (layers + 1) as f64;
    for v in &mut u_sum.data {
        *v *= s;
    }
    for v in &mut c_sum.data {
        *v *= s;
    }
    (u_sum, c_sum)
}

/// Differentiable propagation on a tape; same semantics as
/// [`propagate_value`].
pub fn propagate(
    tape: &mut Tape,
    g: &CodeGraph,
    e_user: Var,
    e_code: Var,
    layers: usize,
) -> (Var, Var) {
    if layers == 0 {
        return (e_user, e_code);
    }
    let (ufc, cfu) = g.operators();
    let (ufc, cfu) = (Rc::new(ufc), Rc::new(cfu));
    let mut u_sum = e_user;
    let mut c_sum = e_code;
    let mut u_cur = e_user;
    let mut c_cur = e_code;
    for _ in 0..layers {
        let u_next = tape.spmm(Rc::clone(&ufc), c_cur);
        let c_next = tape.spmm(Rc::clone(&cfu), u_cur);
        u_sum = tape.add(u_sum, u_next);
        c_sum = tape.add(c_sum, c_next);
        u_cur = u_next;
        c_cur = c_next;
    }
    let s = 1.0 / (layers + 1) as f64;
    (tape.scale(u_sum, s), tape.scale(c_sum, s))
}

/// Debug edge dump, one `u<user> c<level>_<index>` line per edge, users
/// ascending and levels in assignment order.
pub fn render_edges(g: &CodeGraph) -> String {
    let mut out = String::new();
    for (u, adj) in g.user_adj.iter().enumerate() {
        for &c in adj {
            let (level, index) = g.code_labels[c];
            out.push_str(&format!("u{u} c{level}_{index}\n"));
        }
    }
    out
}

pub fn write_edges(path: &Path, g: &CodeGraph) -> Result<(), GraphError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(render_edges(g).as_bytes())?;
    f.flush()?;
    Ok(())
}
