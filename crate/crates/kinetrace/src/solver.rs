//! Sparse Levenberg-Marquardt over whole trajectories.
//!
//! The normal equations of the residual blocks are block-tridiagonal in the
//! per-frame variables with a low-rank arrow tail for the shared ground
//! plane, so each iteration factors the system by forward block elimination
//! in O(frames). Bound constraints (non-negative cone weights, handle-slot
//! limits) are kept by projection with monotone step acceptance, and the
//! stage pipeline fits kinematics, then forces, then both jointly.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};

use crate::contact::ContactBody;
use crate::costs::{
    build_caches, total_cost, EvalContext, Problem, ResidualBlock, Stage, TrajectoryState,
    VarGroup, VarRef,
};
use crate::io::{SolveStats, StageStats};
use crate::spatial::{Rotation, Vec3};

/// Levenberg-Marquardt controls, shared by all stages.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Accepted iterations per stage.
    pub max_iterations: usize,
    /// Stop when the gradient infinity-norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step reduces the cost by less than this factor.
    pub relative_decrease_tolerance: f64,
    /// Initial Marquardt damping (relative to the Hessian diagonal).
    pub initial_damping: f64,
    /// Stage pipeline to run.
    pub stages: Vec<Stage>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 400,
            gradient_tolerance: 1e-6,
            relative_decrease_tolerance: 1e-8,
            initial_damping: 1e-4,
            stages: vec![Stage::Kinematics, Stage::Forces, Stage::Full],
        }
    }
}

const MIN_DIAG: f64 = 1e-8;
const MAX_DAMPING: f64 = 1e14;

/// Fixed ordering of the variable groups inside one frame's slice of the
/// global tangent vector.
const FRAME_GROUPS: [VarGroup; 7] = [
    VarGroup::PersonQ,
    VarGroup::PersonV,
    VarGroup::ObjectQ,
    VarGroup::ObjectV,
    VarGroup::Torque,
    VarGroup::Cone,
    VarGroup::Wrench,
];

/// Within-frame offsets of each variable group.
pub(crate) struct Layout {
    groups: Vec<(VarGroup, usize, usize)>,
    frame_dim: usize,
}

impl Layout {
    pub(crate) fn new(problem: &Problem) -> Layout {
        let mut groups = Vec::new();
        let mut off = 0;
        for g in FRAME_GROUPS {
            let dim = problem.var_dim(g);
            groups.push((g, off, dim));
            off += dim;
        }
        Layout {
            groups,
            frame_dim: off,
        }
    }
}

/// Which tangent coordinates are free in a given stage: frozen groups,
/// frame-0 forces, the object's fixed head extension, out-of-phase contact
/// forces and unused slot coordinates are all masked out.
pub(crate) struct ActiveSet {
    /// Per frame, per within-frame offset: compressed index if free.
    frame_map: Vec<Vec<Option<usize>>>,
    frame_dims: Vec<usize>,
    plane_free: bool,
}

impl ActiveSet {
    pub(crate) fn new(problem: &Problem, layout: &Layout, stage: Stage) -> ActiveSet {
        let frozen = stage.frozen_groups();
        let mut frame_map = Vec::with_capacity(problem.n_frames());
        let mut frame_dims = Vec::with_capacity(problem.n_frames());
        for t in 0..problem.n_frames() {
            let mut map = vec![None; layout.frame_dim];
            let mut next = 0usize;
            for (group, off, dim) in &layout.groups {
                let frozen_group = frozen.contains(group);
                for i in 0..*dim {
                    let mut free = !frozen_group;
                    match group {
                        // No dynamics constrain the transition into frame 0,
                        // so its force variables stay at zero.
                        VarGroup::Torque | VarGroup::Cone | VarGroup::Wrench if t == 0 => {
                            free = false;
                        }
                        VarGroup::Cone => {
                            let k = problem.cone_contacts[i / 4];
                            if !problem.schedule.is_active(k, t) {
                                free = false;
                            }
                        }
                        VarGroup::Wrench => {
                            let k = problem.grasp_contacts[i / 6];
                            if !problem.schedule.is_active(k, t) {
                                free = false;
                            }
                        }
                        VarGroup::ObjectQ => {
                            let object = problem.object.as_ref().expect("object vars");
                            let info = object.object.as_ref().expect("object info");
                            if i == object.v_offset(info.head_joint) {
                                free = false;
                            } else if let Some(slot) = info
                                .contact_joints
                                .iter()
                                .position(|&cj| object.v_offset(cj) == i)
                            {
                                if !slot_in_use(problem, slot, t) {
                                    free = false;
                                }
                            }
                        }
                        _ => {}
                    }
                    if free {
                        map[off + i] = Some(next);
                        next += 1;
                    }
                }
            }
            frame_map.push(map);
            frame_dims.push(next);
        }
        ActiveSet {
            frame_map,
            frame_dims,
            plane_free: !frozen.contains(&VarGroup::Plane),
        }
    }
}

fn slot_in_use(problem: &Problem, slot: usize, frame: usize) -> bool {
    problem.grasp_contacts.iter().any(|&k| {
        problem.schedule.is_active(k, frame)
            && matches!(
                problem.schedule.contacts[k].geometry,
                crate::contact::ContactGeometry::HandleGrasp { slot: s, .. } if s == slot
            )
    })
}

/// The damped normal equations in block-tridiagonal-plus-arrow form.
pub(crate) struct BlockSystem {
    frame_dims: Vec<usize>,
    plane_dim: usize,
    /// Diagonal blocks.
    d: Vec<DMatrix<f64>>,
    /// `o[t]` couples frame `t-1` (rows) to frame `t` (columns); `o[0]` is
    /// empty.
    o: Vec<DMatrix<f64>>,
    /// Frame-to-plane coupling.
    p: Vec<DMatrix<f64>>,
    /// Plane diagonal block.
    a: DMatrix<f64>,
    /// Right-hand side `-J^T r` per frame and for the plane.
    g: Vec<DVector<f64>>,
    g_plane: DVector<f64>,
    pub cost: f64,
    pub grad_inf: f64,
}

enum Target {
    Frame(usize),
    Plane,
}

struct Compressed {
    target: Target,
    ids: Vec<usize>,
    m: DMatrix<f64>,
}

fn compress(
    jac: &DMatrix<f64>,
    var: VarRef,
    layout: &Layout,
    active: &ActiveSet,
) -> Compressed {
    if var.group == VarGroup::Plane {
        if !active.plane_free {
            return Compressed {
                target: Target::Plane,
                ids: Vec::new(),
                m: DMatrix::zeros(jac.nrows(), 0),
            };
        }
        return Compressed {
            target: Target::Plane,
            ids: vec![0, 1, 2],
            m: jac.clone(),
        };
    }
    let (_, off, dim) = *layout
        .groups
        .iter()
        .find(|(g, _, _)| *g == var.group)
        .expect("group in layout");
    let mut ids = Vec::new();
    let mut raw = Vec::new();
    for i in 0..dim {
        if let Some(c) = active.frame_map[var.frame][off + i] {
            ids.push(c);
            raw.push(i);
        }
    }
    let mut m = DMatrix::zeros(jac.nrows(), raw.len());
    for (ci, &i) in raw.iter().enumerate() {
        m.column_mut(ci).copy_from(&jac.column(i));
    }
    Compressed {
        target: Target::Frame(var.frame),
        ids,
        m,
    }
}

fn scatter(dst: &mut DMatrix<f64>, rows: &[usize], cols: &[usize], m: &DMatrix<f64>) {
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &c) in cols.iter().enumerate() {
            dst[(r, c)] += m[(ri, ci)];
        }
    }
}

pub(crate) fn assemble(
    problem: &Problem,
    blocks: &[Box<dyn ResidualBlock>],
    state: &TrajectoryState,
    layout: &Layout,
    active: &ActiveSet,
) -> BlockSystem {
    let t_count = problem.n_frames();
    let plane_dim = if active.plane_free { 3 } else { 0 };
    let caches = build_caches(problem, state);
    let ctx = EvalContext {
        problem,
        state,
        caches: &caches,
    };
    let mut sys = BlockSystem {
        frame_dims: active.frame_dims.clone(),
        plane_dim,
        d: (0..t_count)
            .map(|t| DMatrix::zeros(active.frame_dims[t], active.frame_dims[t]))
            .collect(),
        o: (0..t_count)
            .map(|t| {
                let rows = if t == 0 { 0 } else { active.frame_dims[t - 1] };
                DMatrix::zeros(rows, active.frame_dims[t])
            })
            .collect(),
        p: (0..t_count)
            .map(|t| DMatrix::zeros(active.frame_dims[t], plane_dim))
            .collect(),
        a: DMatrix::zeros(plane_dim, plane_dim),
        g: (0..t_count)
            .map(|t| DVector::zeros(active.frame_dims[t]))
            .collect(),
        g_plane: DVector::zeros(plane_dim),
        cost: 0.0,
        grad_inf: 0.0,
    };

    let mut residual = Vec::new();
    for block in blocks {
        let rows = block.rows();
        residual.resize(rows, 0.0);
        let mut jacs: Vec<DMatrix<f64>> = block
            .vars()
            .iter()
            .map(|v| DMatrix::zeros(rows, problem.var_dim(v.group)))
            .collect();
        block.eval_jac(&ctx, &mut residual, &mut jacs);
        sys.cost += 0.5 * residual.iter().map(|r| r * r).sum::<f64>();

        let comps: Vec<Compressed> = block
            .vars()
            .iter()
            .zip(&jacs)
            .map(|(v, j)| compress(j, *v, layout, active))
            .collect();
        let r_vec = DVector::from_column_slice(&residual);
        for c in &comps {
            if c.ids.is_empty() {
                continue;
            }
            let grad = c.m.transpose() * &r_vec;
            match c.target {
                Target::Frame(t) => {
                    for (gi, &id) in c.ids.iter().enumerate() {
                        sys.g[t][id] -= grad[gi];
                    }
                }
                Target::Plane => {
                    for (gi, &id) in c.ids.iter().enumerate() {
                        sys.g_plane[id] -= grad[gi];
                    }
                }
            }
        }
        for i in 0..comps.len() {
            if comps[i].ids.is_empty() {
                continue;
            }
            for j in i..comps.len() {
                if comps[j].ids.is_empty() {
                    continue;
                }
                let m = comps[i].m.transpose() * &comps[j].m;
                match (&comps[i].target, &comps[j].target) {
                    (Target::Frame(a), Target::Frame(b)) if a == b => {
                        scatter(&mut sys.d[*a], &comps[i].ids, &comps[j].ids, &m);
                        if i != j {
                            scatter(
                                &mut sys.d[*a],
                                &comps[j].ids,
                                &comps[i].ids,
                                &m.transpose(),
                            );
                        }
                    }
                    (Target::Frame(a), Target::Frame(b)) if a + 1 == *b => {
                        scatter(&mut sys.o[*b], &comps[i].ids, &comps[j].ids, &m);
                    }
                    (Target::Frame(a), Target::Frame(b)) if *b + 1 == *a => {
                        scatter(&mut sys.o[*a], &comps[j].ids, &comps[i].ids, &m.transpose());
                    }
                    (Target::Frame(a), Target::Plane) => {
                        scatter(&mut sys.p[*a], &comps[i].ids, &comps[j].ids, &m);
                    }
                    (Target::Plane, Target::Frame(a)) => {
                        scatter(&mut sys.p[*a], &comps[j].ids, &comps[i].ids, &m.transpose());
                    }
                    (Target::Plane, Target::Plane) => {
                        scatter(&mut sys.a, &comps[i].ids, &comps[j].ids, &m);
                    }
                    _ => unreachable!("blocks only couple adjacent frames"),
                }
            }
        }
    }

    // Coordinates no residual touches get a unit diagonal so the factor
    // stays positive definite; their gradient is zero, so their step is too.
    for t in 0..t_count {
        for i in 0..sys.frame_dims[t] {
            if sys.d[t][(i, i)] == 0.0 {
                sys.d[t][(i, i)] = 1.0;
            }
        }
    }
    for i in 0..plane_dim {
        if sys.a[(i, i)] == 0.0 {
            sys.a[(i, i)] = 1.0;
        }
    }

    let mut grad_inf = 0.0f64;
    for gt in &sys.g {
        for x in gt.iter() {
            grad_inf = grad_inf.max(x.abs());
        }
    }
    for x in sys.g_plane.iter() {
        grad_inf = grad_inf.max(x.abs());
    }
    sys.grad_inf = grad_inf;
    sys
}

const BOUND_EPS: f64 = 1e-9;

/// A box-bounded tangent coordinate: the non-negative cone weights and the
/// handle-slot coordinates. `col` is its compressed per-frame column.
struct BoundedCol {
    col: usize,
    lo: f64,
    hi: f64,
    var: BoundedVar,
}

enum BoundedVar {
    /// Index into the frame's cone-weight vector.
    Cone(usize),
    /// Index into the object configuration vector.
    Slot(usize),
}

fn bounded_columns(
    problem: &Problem,
    layout: &Layout,
    active: &ActiveSet,
) -> Vec<Vec<BoundedCol>> {
    let mut out: Vec<Vec<BoundedCol>> = (0..problem.n_frames()).map(|_| Vec::new()).collect();
    for (t, row) in out.iter_mut().enumerate() {
        for (group, off, dim) in &layout.groups {
            match group {
                VarGroup::Cone => {
                    for i in 0..*dim {
                        if let Some(col) = active.frame_map[t][off + i] {
                            row.push(BoundedCol {
                                col,
                                lo: 0.0,
                                hi: f64::INFINITY,
                                var: BoundedVar::Cone(i),
                            });
                        }
                    }
                }
                VarGroup::ObjectQ => {
                    let Some(object) = &problem.object else {
                        continue;
                    };
                    for (j, joint) in object.joints.iter().enumerate() {
                        let Some((lo, hi)) = joint.limits else {
                            continue;
                        };
                        let i = object.v_offset(j);
                        if let Some(col) = active.frame_map[t][off + i] {
                            row.push(BoundedCol {
                                col,
                                lo,
                                hi,
                                var: BoundedVar::Slot(object.q_offset(j)),
                            });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn bounded_value(state: &TrajectoryState, t: usize, var: &BoundedVar) -> f64 {
    match var {
        BoundedVar::Cone(i) => state.cone[t][*i],
        BoundedVar::Slot(qi) => state.object_q[t].0[*qi],
    }
}

/// Solve `(H + lambda diag(H)) delta = -J^T r` by forward block elimination
/// over the frames followed by the plane tail, then back substitution.
/// Columns flagged in `mask` are held fixed (their delta is zero), which
/// keeps the step optimal for the remaining coordinates when a bound is
/// active. `None` if a damped diagonal block is not positive definite.
pub(crate) fn solve_damped(
    sys: &BlockSystem,
    lambda: f64,
    mask: &[Vec<bool>],
) -> Option<(Vec<DVector<f64>>, DVector<f64>)> {
    let t_count = sys.d.len();
    let mut d = sys.d.clone();
    let mut o = sys.o.clone();
    let mut p = sys.p.clone();
    let mut a = sys.a.clone();
    let mut g = sys.g.clone();
    let mut g_plane = sys.g_plane.clone();
    for t in 0..t_count {
        for j in 0..sys.frame_dims[t] {
            if !mask[t][j] {
                continue;
            }
            for k in 0..sys.frame_dims[t] {
                d[t][(j, k)] = 0.0;
                d[t][(k, j)] = 0.0;
            }
            d[t][(j, j)] = 1.0;
            g[t][j] = 0.0;
            for c in 0..sys.plane_dim {
                p[t][(j, c)] = 0.0;
            }
            if t > 0 {
                for r in 0..o[t].nrows() {
                    o[t][(r, j)] = 0.0;
                }
            }
            if t + 1 < t_count {
                for c in 0..o[t + 1].ncols() {
                    o[t + 1][(j, c)] = 0.0;
                }
            }
        }
    }
    for t in 0..t_count {
        for i in 0..sys.frame_dims[t] {
            let s = d[t][(i, i)].abs().max(MIN_DIAG);
            d[t][(i, i)] += lambda * s;
        }
    }
    for i in 0..sys.plane_dim {
        let s = a[(i, i)].abs().max(MIN_DIAG);
        a[(i, i)] += lambda * s;
    }

    let mut chols: Vec<Option<Cholesky<f64, Dyn>>> = Vec::with_capacity(t_count);
    let mut us: Vec<DMatrix<f64>> = Vec::with_capacity(t_count);
    let mut ws: Vec<DMatrix<f64>> = Vec::with_capacity(t_count);
    let mut bs: Vec<DVector<f64>> = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let dim = sys.frame_dims[t];
        let next_dim = if t + 1 < t_count {
            sys.frame_dims[t + 1]
        } else {
            0
        };
        if dim == 0 {
            chols.push(None);
            us.push(DMatrix::zeros(0, next_dim));
            ws.push(DMatrix::zeros(0, sys.plane_dim));
            bs.push(DVector::zeros(0));
            continue;
        }
        let chol = Cholesky::new(d[t].clone())?;
        let w_t = if sys.plane_dim > 0 {
            chol.solve(&p[t])
        } else {
            DMatrix::zeros(dim, 0)
        };
        let b_t = chol.solve(&g[t]);
        if sys.plane_dim > 0 {
            a -= p[t].transpose() * &w_t;
            g_plane -= p[t].transpose() * &b_t;
        }
        let u_t = if next_dim > 0 {
            let u = chol.solve(&o[t + 1]);
            let ot = o[t + 1].transpose();
            d[t + 1] -= &ot * &u;
            if sys.plane_dim > 0 {
                p[t + 1] -= &ot * &w_t;
            }
            g[t + 1] -= &ot * &b_t;
            u
        } else {
            DMatrix::zeros(dim, next_dim)
        };
        chols.push(Some(chol));
        us.push(u_t);
        ws.push(w_t);
        bs.push(b_t);
    }

    let delta_plane = if sys.plane_dim > 0 {
        Cholesky::new(a)?.solve(&g_plane)
    } else {
        DVector::zeros(0)
    };
    let mut delta = vec![DVector::zeros(0); t_count];
    for t in (0..t_count).rev() {
        if sys.frame_dims[t] == 0 {
            continue;
        }
        let mut x = bs[t].clone();
        if sys.plane_dim > 0 {
            x -= &ws[t] * &delta_plane;
        }
        if t + 1 < t_count && sys.frame_dims[t + 1] > 0 {
            x -= &us[t] * &delta[t + 1];
        }
        delta[t] = x;
    }
    Some((delta, delta_plane))
}

fn apply_delta(
    problem: &Problem,
    layout: &Layout,
    active: &ActiveSet,
    state: &TrajectoryState,
    delta_frames: &[DVector<f64>],
    delta_plane: &DVector<f64>,
) -> TrajectoryState {
    let mut out = state.clone();
    for t in 0..problem.n_frames() {
        for (group, off, dim) in &layout.groups {
            if *dim == 0 {
                continue;
            }
            let mut step = vec![0.0; *dim];
            let mut any = false;
            for i in 0..*dim {
                if let Some(c) = active.frame_map[t][off + i] {
                    step[i] = delta_frames[t][c];
                    if step[i] != 0.0 {
                        any = true;
                    }
                }
            }
            if any {
                out.apply_step(problem, VarRef::new(*group, t), &step);
            }
        }
    }
    if delta_plane.len() == 3 {
        out.apply_step(
            problem,
            VarRef::new(VarGroup::Plane, 0),
            &[delta_plane[0], delta_plane[1], delta_plane[2]],
        );
    }
    out.project_bounds(problem);
    out
}

/// Run one optimization stage to convergence (or the iteration cap),
/// returning the improved state and per-stage statistics.
pub fn run_stage(
    problem: &Problem,
    stage: Stage,
    state: TrajectoryState,
    opts: &SolveOptions,
) -> (TrajectoryState, StageStats) {
    let blocks = problem.build_blocks(stage);
    let layout = Layout::new(problem);
    let active = ActiveSet::new(problem, &layout, stage);
    let bounded = bounded_columns(problem, &layout, &active);
    let mut state = state;
    let mut sys = assemble(problem, &blocks, &state, &layout, &active);
    let initial_cost = sys.cost;
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_inf = sys.grad_inf;
    let mut stalled = 0usize;

    'outer: while iterations < opts.max_iterations {
        // Mask coordinates whose gradient pushes into an active bound, and
        // judge convergence on the remaining (projected) gradient.
        let mut mask: Vec<Vec<bool>> = sys.frame_dims.iter().map(|&d| vec![false; d]).collect();
        grad_inf = 0.0;
        for (t, row) in bounded.iter().enumerate() {
            for b in row {
                let v = bounded_value(&state, t, &b.var);
                let g = sys.g[t][b.col];
                if (v <= b.lo + BOUND_EPS && g < 0.0) || (v >= b.hi - BOUND_EPS && g > 0.0) {
                    mask[t][b.col] = true;
                }
            }
            for (j, x) in sys.g[t].iter().enumerate() {
                if !mask[t][j] {
                    grad_inf = grad_inf.max(x.abs());
                }
            }
        }
        for x in &sys.g_plane {
            grad_inf = grad_inf.max(x.abs());
        }
        if grad_inf <= opts.gradient_tolerance {
            converged = true;
            break;
        }
        loop {
            // Grow the masked set until the damped step respects every
            // bound, so the projection below does not disturb an otherwise
            // optimal step.
            let mut trial_mask = mask.clone();
            let mut step = None;
            for _ in 0..10 {
                let Some(s) = solve_damped(&sys, lambda, &trial_mask) else {
                    break;
                };
                let mut grew = false;
                for (t, row) in bounded.iter().enumerate() {
                    for b in row {
                        if trial_mask[t][b.col] {
                            continue;
                        }
                        let v = bounded_value(&state, t, &b.var) + s.0[t][b.col];
                        if v < b.lo - BOUND_EPS || v > b.hi + BOUND_EPS {
                            trial_mask[t][b.col] = true;
                            grew = true;
                        }
                    }
                }
                step = Some(s);
                if !grew {
                    break;
                }
            }
            let Some((df, dp)) = step else {
                lambda *= 10.0;
                if lambda > MAX_DAMPING {
                    break 'outer;
                }
                continue;
            };
            let candidate = apply_delta(problem, &layout, &active, &state, &df, &dp);
            let cost = total_cost(problem, &blocks, &candidate);
            if std::env::var_os("KT_TRACE").is_some() {
                eprintln!(
                    "[{}] it {iterations} cost {:.6e} -> {:.6e} lam {:.1e} grad {:.3e} {}",
                    stage.label(),
                    sys.cost,
                    cost,
                    lambda,
                    grad_inf,
                    if cost.is_finite() && cost < sys.cost { "accept" } else { "reject" },
                );
                if !(cost.is_finite() && cost < sys.cost) {
                    let caches = build_caches(problem, &candidate);
                    let ctx = EvalContext {
                        problem,
                        state: &candidate,
                        caches: &caches,
                    };
                    let mut by_label: std::collections::BTreeMap<&str, f64> =
                        std::collections::BTreeMap::new();
                    for b in &blocks {
                        let mut r = vec![0.0; b.rows()];
                        b.eval(&ctx, &mut r);
                        *by_label.entry(b.label()).or_default() +=
                            0.5 * r.iter().map(|x| x * x).sum::<f64>();
                    }
                    eprintln!("    breakdown: {by_label:?}");
                }
            }
            if cost.is_finite() && cost < sys.cost {
                let drop = (sys.cost - cost) / sys.cost.max(f64::MIN_POSITIVE);
                let near_newton = lambda <= 1e-2;
                state = candidate;
                sys = assemble(problem, &blocks, &state, &layout, &active);
                iterations += 1;
                lambda = (lambda / 3.0).max(1e-12);
                // A negligible decrease only signals a minimum when the
                // step was barely damped (under heavy damping steps are
                // short by construction) and when it repeats: a single tiny
                // drop can be a narrow spot in a valley.
                if drop < opts.relative_decrease_tolerance && near_newton {
                    stalled += 1;
                    if stalled >= 3 {
                        converged = true;
                        break 'outer;
                    }
                } else {
                    stalled = 0;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                // No descent direction clears the bound projection: treat
                // as a (projected) stationary point.
                converged = true;
                break 'outer;
            }
        }
    }

    if std::env::var_os("KT_TIME").is_some() {
        let t0 = std::time::Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let _ = assemble(problem, &blocks, &state, &layout, &active);
        }
        let ta = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let t1 = std::time::Instant::now();
        let no_mask: Vec<Vec<bool>> = sys.frame_dims.iter().map(|&d| vec![false; d]).collect();
        for _ in 0..reps {
            let _ = solve_damped(&sys, 1e-6, &no_mask);
        }
        let ts = t1.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let t2 = std::time::Instant::now();
        for _ in 0..reps {
            let _ = total_cost(problem, &blocks, &state);
        }
        let tc = t2.elapsed().as_secs_f64() * 1e3 / reps as f64;
        eprintln!(
            "[{}] per-call ms: assemble {ta:.2} solve {ts:.2} cost {tc:.2}",
            stage.label()
        );
    }
    let stats = StageStats {
        stage: stage.label().to_string(),
        iterations,
        initial_cost,
        final_cost: sys.cost,
        gradient_norm: grad_inf,
        converged,
    };
    (state, stats)
}

/// Run the configured stage pipeline.
pub fn solve(
    problem: &Problem,
    init: TrajectoryState,
    opts: &SolveOptions,
) -> (TrajectoryState, SolveStats) {
    let start = std::time::Instant::now();
    let mut state = init;
    let mut stages = Vec::new();
    for &stage in &opts.stages {
        let (next, stats) = run_stage(problem, stage, state, opts);
        state = next;
        stages.push(stats);
    }
    (
        state,
        SolveStats {
            stages,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Heuristic initial state: the person in the rest pose, placed per frame by
/// back-projecting the observed keypoints at a depth inferred from their
/// pixel extent; the object (if any) aligned with its observed endpoints;
/// velocities from finite differences; contact forces started at a small
/// feasible share of body weight.
pub fn initialize(problem: &Problem) -> TrajectoryState {
    let mut state = TrajectoryState::neutral(problem);
    let t_count = problem.n_frames();
    if t_count == 0 {
        return state;
    }

    let neutral = problem.person.neutral_configuration();
    let fk = crate::dynamics::forward_kinematics(&problem.person, &neutral);
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut centroid = Vec3::zero();
    for p in &fk.marker_positions {
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
        centroid = centroid.add(*p);
    }
    centroid = centroid.scale(1.0 / fk.marker_positions.len() as f64);
    let model_height = (max_y - min_y).max(0.5);

    // Per-frame centroid of the observations, back-projected at a depth that
    // matches the observed pixel height.
    let mut anchors: Vec<Option<(Vec3<f64>, f64)>> = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let obs = &problem.person_obs[t];
        if obs.len() < 4 {
            anchors.push(None);
            continue;
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut mean = [0.0; 2];
        for o in obs {
            lo = lo.min(o.uv[1]);
            hi = hi.max(o.uv[1]);
            mean[0] += o.uv[0];
            mean[1] += o.uv[1];
        }
        mean[0] /= obs.len() as f64;
        mean[1] /= obs.len() as f64;
        let px = (hi - lo).max(1.0);
        let depth = (problem.camera.fy * model_height / px).clamp(0.5, 20.0);
        anchors.push(Some((problem.camera.back_project(mean, depth), depth)));
    }

    // Choose the base yaw (facing toward or away from the camera) that
    // reprojects the rest pose best across all frames.
    let candidates = [
        Rotation::identity(),
        Rotation::from_wxyz(0.0, 0.0, 1.0, 0.0),
    ];
    let mut best = (f64::INFINITY, 0);
    for (c, rot) in candidates.iter().enumerate() {
        let mut err = 0.0;
        for t in 0..t_count {
            let Some((anchor, _)) = anchors[t] else {
                continue;
            };
            let base = anchor.sub(rot.rotate(centroid));
            for o in &problem.person_obs[t] {
                let marker = fk.marker_positions[o.marker];
                let world = base.add(rot.rotate(marker));
                let (uv, _, _) = problem.camera.project_clamped_with_jacobian(world);
                err += (uv[0] - o.uv[0]).powi(2) + (uv[1] - o.uv[1]).powi(2);
            }
        }
        if err < best.0 {
            best = (err, c);
        }
    }
    let yaw = candidates[best.1];
    let quat = yaw.quat();
    let mut last_anchor = None;
    for t in 0..t_count {
        let anchor = match anchors[t] {
            Some((a, _)) => {
                last_anchor = Some(a);
                a
            }
            None => last_anchor.unwrap_or(Vec3::new(0.0, model_height * 0.55, 0.0)),
        };
        let base = anchor.sub(yaw.rotate(centroid));
        let q = &mut state.person_q[t].0;
        q[0] = base.x;
        q[1] = base.y;
        q[2] = base.z;
        q[3] = quat.w;
        q[4] = quat.x;
        q[5] = quat.y;
        q[6] = quat.z;
    }

    if let Some(object) = &problem.object {
        initialize_object(problem, object, &anchors, &mut state);
    }

    // Velocities from configuration differences; frame 0 copies frame 1.
    for t in 1..t_count {
        let d = problem
            .person
            .difference(&state.person_q[t - 1], &state.person_q[t])
            .expect("initialized configurations are valid");
        state.person_v[t] = crate::model::TangentVector(d.0 / problem.dt);
        if let Some(object) = &problem.object {
            let d = object
                .difference(&state.object_q[t - 1], &state.object_q[t])
                .expect("initialized configurations are valid");
            for i in 0..6 {
                state.object_v[t][i] = d.0[i] / problem.dt;
            }
        }
    }
    if t_count > 1 {
        state.person_v[0] = state.person_v[1].clone();
        if problem.object.is_some() {
            state.object_v[0] = state.object_v[1].clone();
        }
    }

    // Start active ground contacts at an even share of the supported
    // weight so the cone weights begin strictly inside their bounds.
    let person_mass: f64 = problem.person.inertias.iter().map(|i| i.mass).sum();
    let object_mass: f64 = problem
        .object
        .as_ref()
        .map(|o| o.inertias.iter().map(|i| i.mass).sum())
        .unwrap_or(0.0);
    let g = problem.gravity.norm();
    let cos_mu = problem.mu().cos();
    for t in 1..t_count {
        for (body, mass) in [
            (ContactBody::Person, person_mass),
            (ContactBody::Object, object_mass),
        ] {
            let cones = problem.active_cones(body, t);
            if cones.is_empty() {
                continue;
            }
            let share = mass * g / (4.0 * cones.len() as f64 * cos_mu);
            for (slot, _, _) in cones {
                for j in 0..4 {
                    state.cone[t][4 * slot + j] = share;
                }
            }
        }
    }

    state.project_bounds(problem);
    state
}

fn initialize_object(
    problem: &Problem,
    object: &crate::model::KinematicModel,
    person_anchors: &[Option<(Vec3<f64>, f64)>],
    state: &mut TrajectoryState,
) {
    let info = object.object.as_ref().expect("object info");
    let length = info.handle_length;
    let base_marker = object.marker_index("handle_end");
    let head_marker = object.marker_index("head");
    for t in 0..problem.n_frames() {
        // Mid-handle slot positions are a neutral guess for any grasp.
        for &cj in &info.contact_joints {
            state.object_q[t].0[object.q_offset(cj)] = 0.5 * length;
        }
        let obs = &problem.object_obs[t];
        let base_uv = base_marker.and_then(|m| obs.iter().find(|o| o.marker == m));
        let head_uv = head_marker.and_then(|m| obs.iter().find(|o| o.marker == m));
        let (Some(base_obs), Some(head_obs)) = (base_uv, head_uv) else {
            continue;
        };
        let depth = person_anchors[t].map(|(_, d)| d).unwrap_or(3.0);
        let e0 = problem.camera.back_project(base_obs.uv, depth);
        let e1 = problem.camera.back_project(head_obs.uv, depth);
        let axis = e1.sub(e0);
        let rot = if axis.norm() > 1e-6 {
            rotation_aligning_x(axis.scale(1.0 / axis.norm()))
        } else {
            Rotation::identity()
        };
        let quat = rot.quat();
        let q = &mut state.object_q[t].0;
        q[0] = e0.x;
        q[1] = e0.y;
        q[2] = e0.z;
        q[3] = quat.w;
        q[4] = quat.x;
        q[5] = quat.y;
        q[6] = quat.z;
    }
}

/// Rotation taking the x-axis to `dir` (unit), by the shortest arc.
fn rotation_aligning_x(dir: Vec3<f64>) -> Rotation<f64> {
    let ex = Vec3::new(1.0, 0.0, 0.0);
    let c = ex.dot(dir).clamp(-1.0, 1.0);
    if c > 1.0 - 1e-12 {
        return Rotation::identity();
    }
    if c < -1.0 + 1e-12 {
        return Rotation::from_wxyz(0.0, 0.0, 1.0, 0.0);
    }
    let axis = ex.cross(dir);
    let axis = axis.scale(1.0 / axis.norm());
    Rotation::from_rotation_vector(axis.scale(c.acos()))
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Flatten a solved state into the serializable output form.
pub fn export_solution(
    problem: &Problem,
    state: &TrajectoryState,
    stats: SolveStats,
) -> crate::io::Solution {
    let caches = build_caches(problem, state);
    let frame_rot = state.plane.contact_frame();
    let mu = problem.mu();
    let mut frames = Vec::with_capacity(problem.n_frames());
    for t in 0..problem.n_frames() {
        let mut contact_forces = Vec::with_capacity(problem.schedule.contacts.len());
        for (k, c) in problem.schedule.contacts.iter().enumerate() {
            let active = problem.schedule.is_active(k, t);
            let object_pair = problem
                .object
                .as_ref()
                .map(|o| (o, caches[t].object.as_slice()));
            let position = crate::contact::contact_position(
                &c.geometry,
                &caches[t].person,
                object_pair.as_ref().map(|(o, p)| (*o, *p)).as_ref(),
            );
            let record = match &c.geometry {
                crate::contact::ContactGeometry::GroundPoint { .. } => {
                    let slot = problem
                        .cone_contacts
                        .iter()
                        .position(|&kk| kk == k)
                        .expect("cone slot");
                    let lam = &state.cone[t].as_slice()[4 * slot..4 * slot + 4];
                    let force = if active {
                        crate::contact::cone_force_world(&frame_rot, mu, lam)
                    } else {
                        Vec3::zero()
                    };
                    crate::io::ContactForceRecord {
                        name: c.name.clone(),
                        active,
                        position: [position.x, position.y, position.z],
                        force: [force.x, force.y, force.z],
                        moment: [0.0; 3],
                        cone_weights: Some([lam[0], lam[1], lam[2], lam[3]]),
                        slot_coord: None,
                    }
                }
                crate::contact::ContactGeometry::HandleGrasp { slot: obj_slot, .. } => {
                    let slot = problem
                        .grasp_contacts
                        .iter()
                        .position(|&kk| kk == k)
                        .expect("wrench slot");
                    let wv = &state.wrench[t].as_slice()[6 * slot..6 * slot + 6];
                    let object = problem.object.as_ref().expect("grasp object");
                    let info = object.object.as_ref().expect("object info");
                    let coord =
                        state.object_q[t].0[object.q_offset(info.contact_joints[*obj_slot])];
                    crate::io::ContactForceRecord {
                        name: c.name.clone(),
                        active,
                        position: [position.x, position.y, position.z],
                        force: [wv[3], wv[4], wv[5]],
                        moment: [wv[0], wv[1], wv[2]],
                        cone_weights: None,
                        slot_coord: Some(coord),
                    }
                }
            };
            contact_forces.push(record);
        }
        frames.push(crate::io::SolutionFrame {
            person_q: state.person_q[t].0.iter().cloned().collect(),
            person_v: state.person_v[t].0.iter().cloned().collect(),
            object_q: problem
                .object
                .as_ref()
                .map(|_| state.object_q[t].0.iter().cloned().collect()),
            object_v: problem
                .object
                .as_ref()
                .map(|_| state.object_v[t].iter().cloned().collect()),
            torques: state.torque[t].iter().cloned().collect(),
            contact_forces,
        });
    }
    crate::io::Solution {
        schema_version: crate::io::SCHEMA_VERSION.into(),
        fps: 1.0 / problem.dt,
        plane: crate::io::PlaneSpec {
            normal: [state.plane.normal.x, state.plane.normal.y, state.plane.normal.z],
            offset: state.plane.offset,
        },
        frames,
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{ContactSchedule, GroundPlane, Phase};
    use crate::spatial::Placement;
    use crate::costs::{classify_contacts, CostWeights, Observation, PosePrior};
    use crate::model::{build_human_model, default_human_spec, TangentVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn block_elimination_matches_a_dense_solve() {
        let mut rng = StdRng::seed_from_u64(90);
        let dims = [5usize, 0, 3, 6];
        let plane_dim = 3;
        let total: usize = dims.iter().sum::<usize>() + plane_dim;
        let mut rnd = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let mut sys = BlockSystem {
            frame_dims: dims.to_vec(),
            plane_dim,
            d: dims
                .iter()
                .map(|&n| {
                    let m = rnd(n, n);
                    m.transpose() * &m + DMatrix::identity(n, n) * (2.0 + n as f64)
                })
                .collect(),
            o: (0..dims.len())
                .map(|t| {
                    let rows = if t == 0 { 0 } else { dims[t - 1] };
                    rnd(rows, dims[t])
                })
                .collect(),
            p: dims.iter().map(|&n| rnd(n, plane_dim)).collect(),
            a: {
                let m = rnd(plane_dim, plane_dim);
                m.transpose() * &m + DMatrix::identity(plane_dim, plane_dim) * 6.0
            },
            g: dims
                .iter()
                .map(|&n| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
            g_plane: DVector::from_fn(plane_dim, |_, _| rng.gen_range(-1.0..1.0)),
            cost: 0.0,
            grad_inf: 1.0,
        };
        // Make the plane block clearly dominant so the whole arrow matrix
        // stays positive definite.
        sys.a += DMatrix::identity(plane_dim, plane_dim) * 20.0;

        // Dense reference.
        let mut h = DMatrix::zeros(total, total);
        let mut rhs = DVector::zeros(total);
        let mut offs = Vec::new();
        let mut off = 0;
        for &nd in &dims {
            offs.push(off);
            off += nd;
        }
        let plane_off = off;
        for t in 0..dims.len() {
            h.view_mut((offs[t], offs[t]), (dims[t], dims[t]))
                .copy_from(&sys.d[t]);
            if t > 0 {
                h.view_mut((offs[t - 1], offs[t]), (dims[t - 1], dims[t]))
                    .copy_from(&sys.o[t]);
                h.view_mut((offs[t], offs[t - 1]), (dims[t], dims[t - 1]))
                    .copy_from(&sys.o[t].transpose());
            }
            h.view_mut((offs[t], plane_off), (dims[t], plane_dim))
                .copy_from(&sys.p[t]);
            h.view_mut((plane_off, offs[t]), (plane_dim, dims[t]))
                .copy_from(&sys.p[t].transpose());
            rhs.rows_mut(offs[t], dims[t]).copy_from(&sys.g[t]);
        }
        h.view_mut((plane_off, plane_off), (plane_dim, plane_dim))
            .copy_from(&sys.a);
        rhs.rows_mut(plane_off, plane_dim).copy_from(&sys.g_plane);

        let lambda = 0.13;
        let mut h_damped = h.clone();
        for i in 0..total {
            let s = h[(i, i)].abs().max(MIN_DIAG);
            h_damped[(i, i)] += lambda * s;
        }
        let dense = Cholesky::new(h_damped).unwrap().solve(&rhs);

        let no_mask: Vec<Vec<bool>> = dims.iter().map(|&n| vec![false; n]).collect();
        let (df, dp) = solve_damped(&sys, lambda, &no_mask).unwrap();
        for t in 0..dims.len() {
            for i in 0..dims[t] {
                assert!(
                    (df[t][i] - dense[offs[t] + i]).abs() < 1e-9,
                    "frame {t} coord {i}: {} vs {}",
                    df[t][i],
                    dense[offs[t] + i]
                );
            }
        }
        for i in 0..plane_dim {
            assert!((dp[i] - dense[plane_off + i]).abs() < 1e-9);
        }

        // Masked columns are held at zero and eliminated from the dense
        // system (row and column zeroed, unit diagonal, zero right side).
        let mut mask = no_mask;
        mask[0][1] = true;
        mask[2][2] = true;
        let mut h_masked = h.clone();
        let mut rhs_masked = rhs.clone();
        for (t, j) in [(0usize, 1usize), (2, 2)] {
            let jj = offs[t] + j;
            for k in 0..total {
                h_masked[(jj, k)] = 0.0;
                h_masked[(k, jj)] = 0.0;
            }
            h_masked[(jj, jj)] = 1.0;
            rhs_masked[jj] = 0.0;
        }
        for i in 0..total {
            let s = h_masked[(i, i)].abs().max(MIN_DIAG);
            h_masked[(i, i)] += lambda * s;
        }
        let dense_masked = Cholesky::new(h_masked).unwrap().solve(&rhs_masked);
        let (df, dp) = solve_damped(&sys, lambda, &mask).unwrap();
        assert!(df[0][1].abs() < 1e-12 && df[2][2].abs() < 1e-12);
        for t in 0..dims.len() {
            for i in 0..dims[t] {
                assert!((df[t][i] - dense_masked[offs[t] + i]).abs() < 1e-9);
            }
        }
        for i in 0..plane_dim {
            assert!((dp[i] - dense_masked[plane_off + i]).abs() < 1e-9);
        }
    }

    /// A person-only problem whose observations come from a known smooth
    /// trajectory.
    fn tracking_problem(t_count: usize) -> (Problem, TrajectoryState) {
        let person = build_human_model(&default_human_spec()).unwrap();
        let camera = crate::costs::Camera {
            world_from_camera: Placement::new(
                Rotation::from_wxyz(0.0, 0.0, 0.0, 1.0),
                Vec3::new(0.0, 1.0, -3.0),
            ),
            fx: 600.0,
            fy: 600.0,
            cx: 300.0,
            cy: 200.0,
            width: 600,
            height: 400,
        };
        let weights = CostWeights::default();
        let prior =
            PosePrior::from_spec(&PosePrior::synthetic_spec(person.nv() - 6, 2, 5)).unwrap();

        // Ground truth: drift sideways while raising an arm.
        let mut truth_q = Vec::new();
        for t in 0..t_count {
            let mut d = TangentVector::zeros(person.nv());
            d.0[0] = 0.05 * t as f64;
            d.0[1] = 1.0; // stand with the pelvis about a meter up
            let elbow = person.joint_index("left_elbow").unwrap();
            d.0[person.v_offset(elbow)] = 0.15 * t as f64;
            truth_q.push(
                person
                    .integrate(&person.neutral_configuration(), &d)
                    .unwrap(),
            );
        }

        let mut person_obs = Vec::new();
        for q in &truth_q {
            let fk = crate::dynamics::forward_kinematics(&person, q);
            let mut obs = Vec::new();
            for (m, marker) in person.markers.iter().enumerate() {
                let uv = camera.project(fk.marker_positions[m]).unwrap();
                obs.push(Observation {
                    marker: m,
                    joint: marker.joint,
                    offset: marker.offset,
                    uv,
                    weight: weights.data,
                });
            }
            person_obs.push(obs);
        }

        let schedule = ContactSchedule::empty(t_count);
        let (cone_contacts, grasp_contacts) = classify_contacts(&schedule);
        let problem = Problem {
            person,
            object: None,
            camera,
            weights,
            prior: Some(prior),
            schedule,
            dt: 0.1,
            gravity: Vec3::new(0.0, -9.81, 0.0),
            plane_init: GroundPlane::new(Vec3::new(0.0, 1.0, 0.0), 0.0).unwrap(),
            person_obs,
            object_obs: vec![Vec::new(); t_count],
            cone_contacts,
            grasp_contacts,
        };
        let mut truth = TrajectoryState::neutral(&problem);
        truth.person_q = truth_q;
        for t in 1..t_count {
            let d = problem
                .person
                .difference(&truth.person_q[t - 1], &truth.person_q[t])
                .unwrap();
            truth.person_v[t] = TangentVector(d.0 / problem.dt);
        }
        truth.person_v[0] = truth.person_v[1].clone();
        (problem, truth)
    }

    #[test]
    fn kinematics_stage_recovers_a_perturbed_trajectory() {
        let (problem, truth) = tracking_problem(3);
        let mut rng = StdRng::seed_from_u64(91);
        let mut state = truth.clone();
        for t in 0..problem.n_frames() {
            let noise = TangentVector(DVector::from_fn(problem.person.nv(), |_, _| {
                rng.gen_range(-0.06..0.06)
            }));
            state.person_q[t] = problem.person.integrate(&state.person_q[t], &noise).unwrap();
            state.person_v[t] = TangentVector(DVector::zeros(problem.person.nv()));
        }
        let opts = SolveOptions {
            max_iterations: 40,
            ..SolveOptions::default()
        };
        let (fit, stats) = run_stage(&problem, Stage::Kinematics, state, &opts);
        assert!(stats.final_cost < 1e-2 * stats.initial_cost, "{stats:?}");
        assert!(stats.iterations > 0);

        // The fitted markers land within a centimeter of the truth.
        for t in 0..problem.n_frames() {
            let fk_fit = crate::dynamics::forward_kinematics(&problem.person, &fit.person_q[t]);
            let fk_true =
                crate::dynamics::forward_kinematics(&problem.person, &truth.person_q[t]);
            let worst = fk_fit
                .marker_positions
                .iter()
                .zip(&fk_true.marker_positions)
                .map(|(a, b)| a.sub(*b).norm())
                .fold(0.0f64, f64::max);
            assert!(worst < 0.01, "frame {t}: worst marker error {worst}");
        }
    }

    #[test]
    fn force_stage_balances_standing_weight_in_one_pass() {
        let person = build_human_model(&default_human_spec()).unwrap();
        let t_count = 3;
        // Stand with the sole vertices exactly on the ground plane.
        let neutral = person.neutral_configuration();
        let fk = crate::dynamics::joint_placements(&person, neutral.as_slice());
        let mut lowest = f64::INFINITY;
        for sole in &person.soles {
            for v in &sole.vertices {
                lowest = lowest.min(fk[sole.ankle_joint].act_on_point(*v).y);
            }
        }
        let mut d = TangentVector::zeros(person.nv());
        d.0[1] = -lowest;
        let standing = person.integrate(&neutral, &d).unwrap();

        let camera = crate::costs::Camera {
            world_from_camera: Placement::new(
                Rotation::from_wxyz(0.0, 0.0, 0.0, 1.0),
                Vec3::new(0.0, 1.0, -3.0),
            ),
            fx: 600.0,
            fy: 600.0,
            cx: 300.0,
            cy: 200.0,
            width: 600,
            height: 400,
        };
        let mut schedule = ContactSchedule::empty(t_count);
        schedule.add_sole_contacts(
            &person,
            vec![Phase {
                start: 0,
                end: t_count,
            }],
        );
        let (cone_contacts, grasp_contacts) = classify_contacts(&schedule);
        let weights = CostWeights::default();
        let mut person_obs = Vec::new();
        for _ in 0..t_count {
            let fk = crate::dynamics::forward_kinematics(&person, &standing);
            let mut obs = Vec::new();
            for (m, marker) in person.markers.iter().enumerate() {
                let uv = camera.project(fk.marker_positions[m]).unwrap();
                obs.push(Observation {
                    marker: m,
                    joint: marker.joint,
                    offset: marker.offset,
                    uv,
                    weight: weights.data,
                });
            }
            person_obs.push(obs);
        }
        let mass: f64 = person.inertias.iter().map(|i| i.mass).sum();
        let problem = Problem {
            person,
            object: None,
            camera,
            weights,
            prior: None,
            schedule,
            dt: 0.1,
            gravity: Vec3::new(0.0, -9.81, 0.0),
            plane_init: GroundPlane::new(Vec3::new(0.0, 1.0, 0.0), 0.0).unwrap(),
            person_obs,
            object_obs: vec![Vec::new(); t_count],
            cone_contacts,
            grasp_contacts,
        };
        let mut state = TrajectoryState::neutral(&problem);
        for t in 0..t_count {
            state.person_q[t] = standing.clone();
        }

        let opts = SolveOptions::default();
        let (solved, stats) = run_stage(&problem, Stage::Forces, state, &opts);
        assert!(stats.converged, "{stats:?}");
        assert!(
            stats.iterations <= 5,
            "a linear stage should converge almost immediately: {stats:?}"
        );
        // The vertical contact force carries the body weight at every
        // constrained transition.
        let frame_rot = solved.plane.contact_frame();
        for t in 1..t_count {
            let mut vertical = 0.0;
            for (slot, _, _) in problem.active_cones(ContactBody::Person, t) {
                let lam = &solved.cone[t].as_slice()[4 * slot..4 * slot + 4];
                let f = crate::contact::cone_force_world(&frame_rot, problem.mu(), lam);
                vertical += f.y;
            }
            let weight = mass * 9.81;
            assert!(
                (vertical - weight).abs() < 0.01 * weight,
                "frame {t}: supported {vertical:.2} N vs weight {weight:.2} N"
            );
            // All cone weights respect their lower bound.
            assert!(solved.cone[t].iter().all(|&l| l >= 0.0));
        }
    }

    #[test]
    fn initializer_places_the_person_near_the_observations() {
        let (problem, truth) = tracking_problem(4);
        let state = initialize(&problem);
        for t in 0..problem.n_frames() {
            // Base position lands within half a meter of the truth, close
            // enough for the kinematics stage to take over.
            let dx = state.person_q[t].0[0] - truth.person_q[t].0[0];
            let dy = state.person_q[t].0[1] - truth.person_q[t].0[1];
            let dz = state.person_q[t].0[2] - truth.person_q[t].0[2];
            let err = (dx * dx + dy * dy + dz * dz).sqrt();
            assert!(err < 0.5, "frame {t}: base error {err}");
        }
        // Velocities follow the finite differences of the initialized poses.
        let d = problem
            .person
            .difference(&state.person_q[0], &state.person_q[1])
            .unwrap();
        for i in 0..6 {
            assert!((state.person_v[1].0[i] - d.0[i] / problem.dt).abs() < 1e-12);
        }
    }
}
