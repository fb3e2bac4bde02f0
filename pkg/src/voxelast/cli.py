"""Command-line entry points: quad-train, quad-eval, simulate, optimize.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 internal error.  All file outputs are written atomically.
"""

import argparse
import os
import sys


def _build_parser():
    parser = argparse.ArgumentParser(prog="voxelast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("quad-train", "train a quadrature network"),
        ("quad-eval", "compare quadrature rules against the brute-force oracle"),
        ("simulate", "run a forward simulation"),
        ("optimize", "run a physics-aware shape/material optimization"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: alongside config)")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    # imports happen after the thread setup so BLAS picks the env up
    from .config import ConfigError

    try:
        handler = {
            "quad-train": _cmd_quad_train,
            "quad-eval": _cmd_quad_eval,
            "simulate": _cmd_simulate,
            "optimize": _cmd_optimize,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps to exit codes
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


def _out_path(args, cfg, name):
    from .config import resolve_path

    if name is None:
        return None
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        return os.path.join(args.out, os.path.basename(name))
    return resolve_path(cfg, name)


def _cmd_quad_train(args):
    import numpy as np

    from .config import QUAD_TRAIN_SCHEMA, ConfigError, load_config
    from .io import write_csv
    from .quadnet import TrainConfig, save_params, train

    cfg = load_config(args.config, QUAD_TRAIN_SCHEMA)
    if cfg["order"] not in (2, 4):
        raise ConfigError(f"order must be 2 or 4, got {cfg['order']}")
    seed = cfg["seed"] if args.seed is None else args.seed
    tc = TrainConfig(
        order=cfg["order"],
        dataset_size=cfg["dataset_size"],
        batch_size=cfg["batch_size"],
        iterations=cfg["iterations"],
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        gamma_box=cfg["gamma_box"],
        gamma_cond=cfg["gamma_cond"],
        oracle_res=cfg["oracle_res"],
        test_size=cfg["test_size"],
        eval_every=cfg["eval_every"],
        seed=seed,
    )
    params, trace = train(tc, progress=lambda row: print(
        f"iter {row[0]}: train {row[1]:.6f} test_fit {row[5]:.6f}", flush=True
    ))
    save_params(params, _out_path(args, cfg, cfg["output"]))
    write_csv(
        _out_path(args, cfg, cfg["metrics"]),
        ["iteration", "train_total", "train_fit", "train_box", "train_cond",
         "test_fit", "test_cond_median"],
        trace,
    )
    return 0


def _cmd_quad_eval(args):
    import numpy as np

    from .config import QUAD_EVAL_SCHEMA, ConfigError, load_config, resolve_path
    from .io import write_csv
    from .quadnet import forward, load_params
    from .quadrature import (
        QuadratureRule, TestBasis, clip_rule, conditioning, gauss_legendre_rule,
        ground_truth_batch, moment_fit_weights, quad_error,
    )

    cfg = load_config(args.config, QUAD_EVAL_SCHEMA)
    if cfg["order"] not in (2, 4):
        raise ConfigError(f"order must be 2 or 4, got {cfg['order']}")
    if cfg["net"] is None:
        raise ConfigError("quad-eval requires a trained network file under 'net'")
    net = load_params(resolve_path(cfg, cfg["net"]), expected_order=cfg["order"])
    seed = cfg["seed"] if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    n = cfg["n_cells"]
    basis = TestBasis(cfg["order"])
    rows = []
    methods = ("neural", "clip", "moment_fit", "full")
    errors = {m: [] for m in methods}
    conds = {m: [] for m in methods}
    if n > 0:
        cells = rng.uniform(-1.0, 1.0, size=(n, 8))
        gt = ground_truth_batch(cells, basis, cfg["oracle_res"])
        pts, wts = forward(net, cells)
        base = gauss_legendre_rule(cfg["order"])
        for i in range(n):
            rules = {
                "neural": QuadratureRule(pts[i], wts[i]),
                "clip": clip_rule(cells[i], cfg["order"]),
                "moment_fit": moment_fit_weights(cells[i], basis, gt=gt[i]),
                "full": base,
            }
            row = [i]
            for m in methods:
                err = quad_error(rules[m], gt[i], basis)
                cond = conditioning(rules[m])
                errors[m].append(err)
                conds[m].append(cond)
                row.extend([err, cond])
            rows.append(row)
    header = ["cell"]
    for m in methods:
        header.extend([f"qk_{m}", f"cond_{m}"])
    write_csv(_out_path(args, cfg, cfg["per_cell_csv"]), header, rows)
    summary = []
    for m in methods:
        err = np.asarray(errors[m]) if errors[m] else np.zeros(0)
        cnd = np.asarray(conds[m]) if conds[m] else np.zeros(0)
        if err.size:
            # order statistics for the conditioning columns: interpolation
            # between finite and infinite values is meaningless
            summary.append([
                m, err.mean(), np.median(err), np.quantile(err, 0.9),
                np.quantile(cnd, 0.5, method="lower"),
                np.quantile(cnd, 0.9, method="lower"),
            ])
    write_csv(
        _out_path(args, cfg, cfg["summary_csv"]),
        ["method", "qk_mean", "qk_median", "qk_p90", "cond_median", "cond_p90"],
        summary,
    )
    return 0


def _load_grid_block(cfg):
    from . import shapes
    from .config import ConfigError, resolve_path
    from .grid import load_grid_binary, load_grid_text

    block = cfg["grid"]
    if block["file"] is not None:
        path = resolve_path(cfg, block["file"])
        if path.endswith(".bin"):
            return load_grid_binary(path)
        return load_grid_text(path)
    if block["shape"] is not None:
        name = block["shape"]
        if name not in shapes.NAMED_SHAPES:
            raise ConfigError(f"unknown shape {name!r}; known: {sorted(shapes.NAMED_SHAPES)}")
        sdf = shapes.NAMED_SHAPES[name](block["extent"])
        return shapes.discretize(sdf, block["dims"], extent=block["extent"])
    raise ConfigError("grid block needs either 'file' or 'shape'")


def _material_from(cfg_block):
    from .material import Material

    return Material(
        young_modulus=cfg_block["young_modulus"],
        poisson_ratio=cfg_block["poisson_ratio"],
        density=cfg_block["density"],
    )


def _setup_from(cfg_block, source):
    from .fem import DirichletRegion, LoadRegion, SimSetup

    return SimSetup(
        dt=cfg_block["dt"],
        gravity=cfg_block["gravity"],
        dirichlet=[DirichletRegion(b["lo"], b["hi"], b["value"]) for b in cfg_block["dirichlet"]],
        loads=[LoadRegion(b["lo"], b["hi"], b["force"]) for b in cfg_block["loads"]],
        quadrature_source=source,
    )


def _stiffness_for(grid, regions):
    import numpy as np

    mult = np.ones(grid.n_cells)
    if not regions:
        return mult
    h = grid.spacing
    nx, ny, _ = grid.dims
    cells = np.arange(grid.n_cells)
    centers = grid.origin + h * (
        np.stack([cells % nx, (cells // nx) % ny, cells // (nx * ny)], axis=-1) + 0.5
    )
    for region in regions:
        inside = np.all((centers >= region["lo"]) & (centers <= region["hi"]), axis=-1)
        mult[inside] *= region["multiplier"]
    return mult


def _load_net(cfg, quad_block):
    from .config import ConfigError, resolve_path
    from .quadnet import load_params

    if quad_block["source"] != "neural":
        return None
    if quad_block["net"] is None:
        raise ConfigError("neural quadrature requires a 'net' parameter file")
    return load_params(resolve_path(cfg, quad_block["net"]), expected_order=quad_block["order"])


def _cmd_simulate(args):
    import numpy as np

    from .config import SIMULATE_SCHEMA, ConfigError, load_config
    from .fem import FemProblem, build_dofs, newton_solve
    from .grid import classify_cells, save_isosurface_obj
    from .io import write_csv, write_vtk_grid
    from .material import mat6
    from .mixedfem import PenaltyConfig, mixed_newton_solve
    from .rules import build_cell_rules

    cfg = load_config(args.config, SIMULATE_SCHEMA)
    grid = _load_grid_block(cfg)
    mat = _material_from(cfg["material"])
    quad = cfg["quadrature"]
    if quad["source"] not in ("full", "clip", "neural", "moment_fit"):
        raise ConfigError(f"unknown quadrature source {quad['source']!r}")
    setup = _setup_from(cfg["setup"], quad["source"])
    net = _load_net(cfg, quad)
    cls = classify_cells(grid)
    if cls.active.size == 0:
        raise ConfigError("grid contains no material")
    dofmap = build_dofs(grid, cls, setup)
    rules = build_cell_rules(
        grid, cls, quad["source"], order=quad["order"], net=net, oracle_res=quad["oracle_res"]
    )
    stiffness = _stiffness_for(grid, cfg["material"]["stiffness_regions"])
    problem = FemProblem(grid, dofmap, rules, setup, mat, stiffness_scale=stiffness[dofmap.cells])
    solver = cfg["solver"]
    if solver["kind"] == "displacement":
        result = newton_solve(
            problem, tol=solver["tol"], max_iters=solver["max_iters"],
            linear_solver=solver["linear_solver"], linear_tol=solver["linear_tol"],
        )
        u = result.u
        trace_header = ["iteration", "residual", "energy", "step_scale"]
        strain_field = None
        state = None
    elif solver["kind"] == "mixed":
        pen = PenaltyConfig(epsilon=solver["epsilon"])
        result = mixed_newton_solve(
            problem, pen=pen, tol=solver["tol"], max_iters=solver["max_iters"],
            linear_solver=solver["linear_solver"], linear_tol=solver["linear_tol"],
        )
        state = result.state
        u = state.u
        trace_header = ["iteration", "merit", "constraint_max", "u_residual", "step_scale"]
        strain_field = np.linalg.norm(
            mat6(state.strain) - np.eye(3), axis=(-2, -1)
        ).mean(axis=1)
    else:
        raise ConfigError(f"unknown solver kind {solver['kind']!r}")

    outputs = cfg["outputs"]
    if outputs["trace_csv"]:
        write_csv(_out_path(args, cfg, outputs["trace_csv"]), trace_header, result.trace)
    if outputs["rest_obj"]:
        save_isosurface_obj(_out_path(args, cfg, outputs["rest_obj"]), grid)
    if outputs["deformed_obj"]:
        def displace(pts):
            vals = np.zeros_like(pts)
            nx, ny, nz = grid.dims
            nxn, nyn = nx + 1, ny + 1
            remap = np.full((nx + 1) * (ny + 1) * (nz + 1), -1, dtype=np.int64)
            remap[dofmap.nodes] = np.arange(dofmap.nodes.size)
            local = (pts - grid.origin) / grid.spacing
            cell = np.clip(np.floor(local).astype(np.int64), 0, np.asarray(grid.dims) - 1)
            frac = local - cell
            from . import hexa

            shape_vals = hexa.shape_values(frac)
            for j in range(8):
                dxyz = [(j >> a) & 1 for a in range(3)]
                node = (cell[:, 0] + dxyz[0]) + nxn * (
                    (cell[:, 1] + dxyz[1]) + nyn * (cell[:, 2] + dxyz[2])
                )
                idx = remap[node]
                good = idx >= 0
                vals[good] += shape_vals[good, j, None] * u[idx[good]]
            return vals

        save_isosurface_obj(_out_path(args, cfg, outputs["deformed_obj"]), grid, displace)
    if outputs["strain_vtk"]:
        per_cell = np.zeros(grid.n_cells)
        if strain_field is not None:
            per_cell[dofmap.cells] = strain_field
        else:
            f = problem.deformation_gradients(u)
            per_cell[dofmap.cells] = np.linalg.norm(f - np.eye(3), axis=(-2, -1)).mean(axis=1)
        write_vtk_grid(
            _out_path(args, cfg, outputs["strain_vtk"]), grid,
            cell_scalars={"strain_norm": per_cell},
            point_scalars={"phi": grid.phi.reshape(-1, order="F")},
        )
    return 0 if result.converged else 3


def _cmd_optimize(args):
    from .config import OPTIMIZE_SCHEMA, ConfigError, load_config
    from .grid import SmoothingConfig, save_grid_text, save_isosurface_obj
    from .io import write_csv
    from .mixedfem import PenaltyConfig
    from .optim import OptimProblem, PhysLossConfig, Schedule, optimize

    cfg = load_config(args.config, OPTIMIZE_SCHEMA)
    grid = _load_grid_block(cfg)
    mat = _material_from(cfg["material"])
    quad = cfg["quadrature"]
    setup = _setup_from(cfg["setup"], "neural")
    net = _load_net(cfg, {**quad, "source": "neural"})
    seed = cfg["seed"] if args.seed is None else args.seed
    sched = cfg["schedule"]
    loss = cfg["loss"]
    smoothing = SmoothingConfig(
        sigma=cfg["smoothing"]["sigma"],
        kernel_radius=cfg["smoothing"]["kernel_radius"],
        symmetry_axis=cfg["smoothing"]["symmetry_axis"],
    )
    problem = OptimProblem(
        grid_template=grid,
        target_phi=grid.phi.copy(),
        material=mat,
        net=net,
        setup=setup,
        phys=PhysLossConfig(ell_u=loss["ell_u"], ell_sigma=loss["ell_sigma"], power=loss["power"]),
        schedule=Schedule(
            total_iters=sched["total_iters"],
            recon_only_fraction=sched["recon_only_fraction"],
            dt_ramp_fraction=sched["dt_ramp_fraction"],
            dt_initial_scale=sched["dt_initial_scale"],
            dt_final=sched["dt_final"],
            learning_rate=sched["learning_rate"],
        ),
        smoothing=smoothing,
        pen=PenaltyConfig(epsilon=cfg["solver"]["epsilon"]),
        recon_weight=loss["recon_weight"],
        phys_weight=loss["phys_weight"],
        reg_weight=loss["reg_weight"],
        newton_steps=cfg["newton_steps"],
        order=quad["order"],
        init_noise=cfg["init_noise"],
        optimize_shape=cfg["optimize_shape"],
        optimize_stiffness=cfg["optimize_stiffness"],
        seed=seed,
        linear_solver=cfg["solver"]["linear_solver"],
        snapshot_every=cfg["snapshot_every"],
    )
    result = optimize(problem)
    outputs = cfg["outputs"]
    write_csv(
        _out_path(args, cfg, outputs["trace_csv"]),
        ["iteration", "recon", "phys", "reg", "total"],
        result.trace,
    )
    save_grid_text(_out_path(args, cfg, outputs["final_grid"]), result.grid)
    if outputs["rest_obj"]:
        save_isosurface_obj(_out_path(args, cfg, outputs["rest_obj"]), result.grid)
    for it, note in result.events:
        print(f"iteration {it}: {note}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
