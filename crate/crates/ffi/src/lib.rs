//! C ABI over `tsne_limits`.
//!
//! Every fallible call returns a [`TslStatus`]; on failure the message is
//! available from [`tsl_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_parse`/`*_build` and released with the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tsne_limits::data::{BandwidthField, DensitySpec, PointCloud};
use tsne_limits::discrete::{descend, kl_terms, DescentOptions, EmbeddingState, Mode};
use tsne_limits::error::Error;
use tsne_limits::experiments::ExperimentConfig;
use tsne_limits::graph::{build_affinities, AffinityGraph, GraphOptions};
use tsne_limits::kernels::{KernelFamily, KernelSpec};
use tsne_limits::solver1d::{Potential1D, Problem1D, SolverOptions, SolverResult};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parameter = 3,
    Divergence = 4,
    IsolatedVertex = 5,
    Resolution = 6,
    DegenerateSupport = 7,
    InfiniteEnergy = 8,
    Nonconvergence = 9,
    InternalConsistency = 10,
    Dimension = 11,
    Input = 12,
    Precondition = 13,
    Io = 14,
    BufferTooSmall = 15,
    Panic = 16,
}

impl From<&Error> for TslStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parameter(_) => TslStatus::Parameter,
            Error::Divergence(_) => TslStatus::Divergence,
            Error::IsolatedVertex(_) => TslStatus::IsolatedVertex,
            Error::Resolution(_) => TslStatus::Resolution,
            Error::DegenerateSupport(_) => TslStatus::DegenerateSupport,
            Error::InfiniteEnergy(_) => TslStatus::InfiniteEnergy,
            Error::Nonconvergence { .. } => TslStatus::Nonconvergence,
            Error::InternalConsistency(_) => TslStatus::InternalConsistency,
            Error::Dimension(_) => TslStatus::Dimension,
            Error::Input(_) => TslStatus::Input,
            Error::Precondition(_) => TslStatus::Precondition,
            Error::Io(_) => TslStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(TslStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> TslStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TslStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside tsne_limits".into());
            TslStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(TslStatus::NullPointer, format!("{name} is null"))
}

unsafe fn string_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TslStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, cap: usize) -> FfiResult<()> {
    if cap < src.len() {
        return Err(Failure(TslStatus::BufferTooSmall, format!("buffer holds {cap}, need {}", src.len())));
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(null("out buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn tsl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque data density.
pub struct TslDensity(DensitySpec);

/// Opaque 1D/2D/3D kernel.
pub struct TslKernel(KernelSpec);

/// Opaque affinity graph `P`.
pub struct TslGraph(AffinityGraph);

/// Opaque 1D continuum problem.
pub struct TslProblem1D(Problem1D);

/// Opaque solver output.
pub struct TslSolution(SolverResult);

/// Opaque gradient-descent output.
pub struct TslEmbedding(EmbeddingState);

/// Parse `uniform`, `uniform:a,b` or `mixture:p,var,c`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_density_parse(spec: *const c_char, out: *mut *mut TslDensity) -> TslStatus {
    guard(|| {
        let d = DensitySpec::parse(string_arg(spec, "spec")?)?;
        write_out(out, Box::into_raw(Box::new(TslDensity(d))), "out")
    })
}

/// # Safety
/// `d` must be null or come from `tsl_density_parse`.
#[no_mangle]
pub unsafe extern "C" fn tsl_density_free(d: *mut TslDensity) {
    free_box(d)
}

/// Draw `n` i.i.d. samples into `out` (capacity `cap ≥ n·dim`).
///
/// # Safety
/// `d` must be a live handle and `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn tsl_density_sample(d: *const TslDensity, n: usize, seed: u64, out: *mut f64, cap: usize) -> TslStatus {
    guard(|| {
        let d = handle(d, "density")?;
        let cloud = d.0.sample(n, seed)?;
        copy_out(&cloud.points, out, cap)
    })
}

/// # Safety
/// `d` must be a live handle, `x` must hold `dim` doubles, `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_density_pdf(d: *const TslDensity, x: *const f64, out: *mut f64) -> TslStatus {
    guard(|| {
        let d = handle(d, "density")?;
        let x = slice_arg(x, d.0.dim(), "x")?;
        write_out(out, d.0.pdf(x), "out")
    })
}

/// `family` is `gaussian`, `epanechnikov` or `truncated-gaussian`.
///
/// # Safety
/// `family` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_kernel_new(family: *const c_char, dim: usize, out: *mut *mut TslKernel) -> TslStatus {
    guard(|| {
        let fam: KernelFamily = string_arg(family, "family")?.parse()?;
        let k = KernelSpec::new(fam, dim)?;
        write_out(out, Box::into_raw(Box::new(TslKernel(k))), "out")
    })
}

/// # Safety
/// `k` must be null or come from `tsl_kernel_new`.
#[no_mangle]
pub unsafe extern "C" fn tsl_kernel_free(k: *mut TslKernel) {
    free_box(k)
}

/// `Θ(v) = v² Φ₁'(v)` of a 1D kernel.
///
/// # Safety
/// `k` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_kernel_theta(k: *const TslKernel, v: f64, out: *mut f64) -> TslStatus {
    guard(|| {
        let k = handle(k, "kernel")?;
        write_out(out, k.0.theta(v)?, "out")
    })
}

/// `Φ₁(v)` of a 1D kernel.
///
/// # Safety
/// `k` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_kernel_phi1(k: *const TslKernel, v: f64, out: *mut f64) -> TslStatus {
    guard(|| {
        let k = handle(k, "kernel")?;
        if k.0.dim != 1 {
            return Err(Failure(TslStatus::Dimension, "Φ₁(v) needs a 1D kernel".into()));
        }
        write_out(out, k.0.phi1(v), "out")
    })
}

/// Affinities of `n` points of dimension `dim` stored row-major in `points`.
///
/// `sigma` is `knn`, `power` or a constant such as `1`.
///
/// # Safety
/// Handles must be live, `points` must hold `n·dim` doubles, strings NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_graph_build(
    points: *const f64,
    n: usize,
    dim: usize,
    kernel: *const TslKernel,
    sigma: *const c_char,
    density: *const TslDensity,
    h: f64,
    include_self_in_degree: bool,
    out: *mut *mut TslGraph,
) -> TslStatus {
    guard(|| {
        let pts = slice_arg(points, n * dim, "points")?.to_vec();
        let cloud = PointCloud::from_points(dim, pts)?;
        let sigma = BandwidthField::parse(string_arg(sigma, "sigma")?)?;
        let g = build_affinities(
            &cloud,
            &handle(kernel, "kernel")?.0,
            &sigma,
            &handle(density, "density")?.0,
            h,
            GraphOptions { include_self_in_degree },
        )?;
        write_out(out, Box::into_raw(Box::new(TslGraph(g))), "out")
    })
}

/// # Safety
/// `g` must be null or come from `tsl_graph_build`.
#[no_mangle]
pub unsafe extern "C" fn tsl_graph_free(g: *mut TslGraph) {
    free_box(g)
}

/// Number of vertices.
///
/// # Safety
/// `g` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn tsl_graph_len(g: *const TslGraph) -> usize {
    g.as_ref().map_or(0, |g| g.0.n)
}

/// Symmetric `p_ij`.
///
/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_graph_p(g: *const TslGraph, i: usize, j: usize, out: *mut f64) -> TslStatus {
    guard(|| {
        let g = handle(g, "graph")?;
        if i >= g.0.n || j >= g.0.n {
            return Err(Failure(TslStatus::Parameter, format!("index ({i}, {j}) out of range")));
        }
        write_out(out, g.0.symmetric.get(i, j), "out")
    })
}

fn parse_mode(s: &str) -> FfiResult<Mode> {
    Ok(s.parse::<Mode>()?)
}

/// KL divergence of `P` against the embedding `y` (`n·m` doubles) with t-SNE or SNE `ψ`.
///
/// # Safety
/// Handles must be live, `y` must hold `n·m` doubles, `mode` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_kl(g: *const TslGraph, y: *const f64, m: usize, mode: *const c_char, out: *mut f64) -> TslStatus {
    guard(|| {
        let g = handle(g, "graph")?;
        let y = slice_arg(y, g.0.n * m, "y")?;
        let mode = parse_mode(string_arg(mode, "mode")?)?;
        write_out(out, kl_terms(&g.0, y, m, mode.psi())?.0, "out")
    })
}

/// Plain gradient descent `Y ← Y − dt ∇KL` from `y0`.
///
/// # Safety
/// Handles must be live, `y0` must hold `n·m` doubles, `mode` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_embed(
    g: *const TslGraph,
    y0: *const f64,
    m: usize,
    steps: usize,
    dt: f64,
    mode: *const c_char,
    seed: u64,
    out: *mut *mut TslEmbedding,
) -> TslStatus {
    guard(|| {
        let g = handle(g, "graph")?;
        let y0 = slice_arg(y0, g.0.n * m, "y0")?;
        let opts = DescentOptions {
            steps,
            dt,
            mode: parse_mode(string_arg(mode, "mode")?)?,
            record_every: steps.max(1),
        };
        let state = descend(&g.0, y0, m, seed, opts)?;
        write_out(out, Box::into_raw(Box::new(TslEmbedding(state))), "out")
    })
}

/// # Safety
/// `e` must be null or come from `tsl_embed`.
#[no_mangle]
pub unsafe extern "C" fn tsl_embedding_free(e: *mut TslEmbedding) {
    free_box(e)
}

/// Copy the final embedding into `out` (capacity `cap ≥ n·m`).
///
/// # Safety
/// `e` must be a live handle and `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn tsl_embedding_copy_y(e: *const TslEmbedding, out: *mut f64, cap: usize) -> TslStatus {
    guard(|| copy_out(&handle(e, "embedding")?.0.y, out, cap))
}

/// Final KL, the number of steps taken and whether the run diverged.
///
/// # Safety
/// `e` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_embedding_summary(e: *const TslEmbedding, final_kl: *mut f64, steps: *mut usize, diverged: *mut bool) -> TslStatus {
    guard(|| {
        let e = &handle(e, "embedding")?.0;
        write_out(final_kl, e.final_loss().unwrap_or(f64::NAN), "final_kl")?;
        write_out(steps, e.step, "steps")?;
        write_out(diverged, e.diverged, "diverged")
    })
}

/// Continuum problem `min ∫Φ₁(σT')ρ + log ∫ρ²/T'` on a uniform grid of `nodes` points.
///
/// # Safety
/// Handles must be live, `sigma` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_problem1d_new(
    density: *const TslDensity,
    sigma: *const c_char,
    kernel: *const TslKernel,
    nodes: usize,
    out: *mut *mut TslProblem1D,
) -> TslStatus {
    guard(|| {
        let sigma = BandwidthField::parse(string_arg(sigma, "sigma")?)?;
        let p = Problem1D::new(&handle(density, "density")?.0, &sigma, Potential1D::kernel(handle(kernel, "kernel")?.0), nodes)?;
        write_out(out, Box::into_raw(Box::new(TslProblem1D(p))), "out")
    })
}

/// # Safety
/// `p` must be null or come from `tsl_problem1d_new`.
#[no_mangle]
pub unsafe extern "C" fn tsl_problem1d_free(p: *mut TslProblem1D) {
    free_box(p)
}

/// Run the monotone fixed-point iteration.
///
/// # Safety
/// `p` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_problem1d_solve(p: *const TslProblem1D, delta0: f64, tol: f64, max_iter: usize, out: *mut *mut TslSolution) -> TslStatus {
    guard(|| {
        let r = handle(p, "problem")?.0.solve(SolverOptions { delta0, tol, max_iter })?;
        write_out(out, Box::into_raw(Box::new(TslSolution(r))), "out")
    })
}

/// # Safety
/// `s` must be null or come from `tsl_problem1d_solve`.
#[no_mangle]
pub unsafe extern "C" fn tsl_solution_free(s: *mut TslSolution) {
    free_box(s)
}

/// Grid length of the solution, 0 for null.
///
/// # Safety
/// `s` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn tsl_solution_len(s: *const TslSolution) -> usize {
    s.as_ref().map_or(0, |s| s.0.u_star.x.len())
}

/// `b*`, the Euler–Lagrange residual and the minimal value `F[u*]`.
///
/// # Safety
/// `s` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsl_solution_summary(s: *const TslSolution, b_star: *mut f64, residual: *mut f64, f_value: *mut f64) -> TslStatus {
    guard(|| {
        let s = &handle(s, "solution")?.0;
        write_out(b_star, s.b_star, "b_star")?;
        write_out(residual, s.residual, "residual")?;
        write_out(f_value, s.f_value, "f_value")
    })
}

/// Copy grid `x`, `u* = T*'` and `T*` into caller buffers of capacity `cap` each; any may be null.
///
/// # Safety
/// `s` must be a live handle; non-null buffers must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn tsl_solution_copy(s: *const TslSolution, x: *mut f64, u: *mut f64, t: *mut f64, cap: usize) -> TslStatus {
    guard(|| {
        let s = &handle(s, "solution")?.0;
        for (src, dst) in [(&s.u_star.x, x), (&s.u_star.u, u), (&s.t_star.t, t)] {
            if !dst.is_null() {
                copy_out(src, dst, cap)?;
            }
        }
        Ok(())
    })
}

/// Run a TOML experiment config and write its artifacts to `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tsl_run_config(config_toml: *const c_char, out_dir: *const c_char) -> TslStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(string_arg(config_toml, "config_toml")?, false)?;
        let dir = Path::new(string_arg(out_dir, "out_dir")?);
        let artifacts = cfg.run()?;
        artifacts.write(dir, cfg.command.name(), &cfg.hash())?;
        Ok(())
    })
}
