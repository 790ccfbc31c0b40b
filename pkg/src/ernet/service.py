"""HTTP facade over the engine.

Every pipeline stage (synthesize, train, evaluate, benchmark, explain) is a
POST endpoint with pydantic request/response models; the command-line tool
is a thin client of this app, mounted in-process by default. Argument
problems map to 400, data/model problems to 409.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__, data, explain, models, train
from .errors import ArgumentError, ErnetError
from .tensor import make_rng, spawn_rngs

app = FastAPI(title="ernet", version=__version__)

SPLIT_RATIOS = (0.6, 0.2, 0.2)


def _parse_dims(text: str, want: int) -> tuple:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != want or any(d < 1 for d in dims):
        raise ArgumentError(
            f"expected {want} positive extents like "
            f"{'x'.join(['N'] * want)}, got {text!r}"
        )
    return dims


@app.exception_handler(ArgumentError)
async def _argument_error(_: Request, exc: ArgumentError):
    return JSONResponse(status_code=400, content={"error": str(exc)})


@app.exception_handler(ErnetError)
async def _engine_error(_: Request, exc: ErnetError):
    return JSONResponse(status_code=409, content={"error": str(exc)})


@app.exception_handler(FileNotFoundError)
async def _missing_file(_: Request, exc: FileNotFoundError):
    return JSONResponse(status_code=409, content={"error": f"missing file: {exc}"})


# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

class SynthRequest(BaseModel):
    out: str
    classes: int = 5
    per_class: int = 100
    size: str = "64x64"
    seed: int = 0


class SynthResponse(BaseModel):
    root: str
    class_names: list
    per_class: int
    files: int


class TrainRequest(BaseModel):
    data: str
    out: str
    variant: str = "ernet"
    input: str = "240x240x3"
    epochs: int = 200
    iters: int = 100
    batch: int = 64
    lr0: float = 0.001
    decay: float = 0.95
    decay_every: int = 5
    l2: float = 1e-4
    seed: int = 0
    early_stop: Optional[float] = None


class TrainResponse(BaseModel):
    model_path: str
    history_path: str
    history_kv_path: str
    manifest_path: str
    best_epoch: int
    best_val_acc: Optional[float]
    epochs_run: int
    history: list
    table: str


class EvalRequest(BaseModel):
    model: str
    data: str
    seed: int = 0
    batch: int = 64


class EvalResponse(BaseModel):
    avg_acc: float
    plain_acc: float
    per_class_acc: list
    confusion: list
    class_names: list
    model_bytes: int
    table: str
    kv: str


class BenchRequest(BaseModel):
    models: list = Field(min_length=1)
    input: str = "240x240x3"
    warmup: int = 5
    runs: int = 30
    baseline: str = "basenet"
    seed: int = 0


class BenchResponse(BaseModel):
    rows: list
    baseline: str
    machine: dict
    table: str


class CamRequest(BaseModel):
    model: str
    images: list = Field(min_length=1)
    out: str
    alpha: float = 0.35
    target: Optional[int] = None


class CamResponse(BaseModel):
    outputs: list


# ---------------------------------------------------------------------------
# endpoints
# ---------------------------------------------------------------------------

@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__, "variants": list(models.VARIANTS)}


@app.post("/synth", response_model=SynthResponse)
def synth(req: SynthRequest) -> SynthResponse:
    h, w = _parse_dims(req.size, 2)
    names = data.synth_dataset(req.out, req.classes, req.per_class, make_rng(req.seed), hw=(h, w))
    return SynthResponse(
        root=req.out, class_names=names, per_class=req.per_class,
        files=req.classes * req.per_class,
    )


def _split_for(root: str, seed: int) -> data.DatasetManifest:
    _, _, split_rng = spawn_rngs(seed, 3)
    return data.split_dataset(data.scan_dataset(root), SPLIT_RATIOS, split_rng)


@app.post("/train", response_model=TrainResponse)
def run_train(req: TrainRequest) -> TrainResponse:
    h, w, c = _parse_dims(req.input, 3)
    model_rng, batch_rng, _ = spawn_rngs(req.seed, 3)
    split = _split_for(req.data, req.seed)
    graph = models.build_model(req.variant, (h, w, c), split.class_count(), model_rng)
    cfg = train.TrainConfig(
        epochs=req.epochs, iters_per_epoch=req.iters, batch_size=req.batch,
        lr0=req.lr0, decay_factor=req.decay, decay_every=req.decay_every,
        l2_lambda=req.l2, seed=req.seed,
    )
    batches = data.balanced_batch_iter(
        split, cfg.batch_size, (h, w), batch_rng, augment=data.AugmentConfig()
    )
    val_fn = None
    if split.select("val"):
        val_fn = lambda: data.eval_batches(split, "val", (h, w), cfg.batch_size)  # noqa: E731
    history = train.train(
        graph, batches, cfg,
        val_batches_fn=val_fn,
        early_stop_val_acc=req.early_stop,
    )
    os.makedirs(req.out, exist_ok=True)
    model_path = os.path.join(req.out, f"{graph.name}.ernet")
    history_path = os.path.join(req.out, "history.txt")
    history_kv_path = os.path.join(req.out, "history.kv")
    manifest_path = os.path.join(req.out, "manifest.tsv")
    models.save_model(graph, model_path)
    with open(history_path, "w") as fh:
        fh.write(train.history_table(history))
    with open(history_kv_path, "w") as fh:
        fh.write(train.history_kv(history))
    with open(manifest_path, "w") as fh:
        fh.write(data.export_manifest(split))
    scored = [rec for rec in history if "val_avg_acc" in rec]
    best = max(scored, key=lambda rec: rec["val_avg_acc"]) if scored else {"epoch": -1}
    return TrainResponse(
        model_path=model_path, history_path=history_path,
        history_kv_path=history_kv_path, manifest_path=manifest_path,
        best_epoch=best["epoch"], best_val_acc=best.get("val_avg_acc"),
        epochs_run=len(history), history=history, table=train.history_table(history),
    )


@app.post("/eval", response_model=EvalResponse)
def run_eval(req: EvalRequest) -> EvalResponse:
    graph = models.load_model(req.model)
    split = _split_for(req.data, req.seed)
    h, w, _ = graph.input_shape
    report = train.evaluate(graph, data.eval_batches(split, "test", (h, w), req.batch))
    return EvalResponse(
        avg_acc=report.avg_acc,
        plain_acc=report.plain_acc,
        per_class_acc=[float(a) for a in report.per_class_acc],
        confusion=report.confusion.tolist(),
        class_names=split.class_names,
        model_bytes=report.model_bytes,
        table=train.report_table(report, split.class_names),
        kv=train.report_kv(report),
    )


def _graph_for_bench(token: str, input_shape, rng) -> models.ModelGraph:
    """A variant name builds fresh weights at --input; a path loads a file."""
    if token.lower() in models.VARIANTS:
        return models.build_model(token, input_shape, 5, rng)
    return models.load_model(token)


@app.post("/bench", response_model=BenchResponse)
def run_bench(req: BenchRequest) -> BenchResponse:
    h, w, c = _parse_dims(req.input, 3)
    rng = make_rng(req.seed)
    named = []
    seen: dict = {}
    for token in req.models:
        graph = _graph_for_bench(token, (h, w, c), rng)
        name = graph.name
        seen[name] = seen.get(name, 0) + 1
        if seen[name] > 1:
            name = f"{name}#{seen[name]}"
        named.append((name, graph))
    result = train.bench_models(
        named, warmup=req.warmup, runs=req.runs, baseline=req.baseline, rng=rng
    )
    return BenchResponse(
        rows=result["rows"], baseline=result["baseline"],
        machine=result["machine"], table=train.bench_table(result),
    )


@app.post("/cam", response_model=CamResponse)
def run_cam(req: CamRequest) -> CamResponse:
    graph = models.load_model(req.model)
    h, w, _ = graph.input_shape
    os.makedirs(req.out, exist_ok=True)
    outputs = []
    for path in req.images:
        img = data.load_image(path)
        if img.shape[:2] != (h, w):
            img = data.resize_bilinear(img, h, w).astype(np.float32)
        cam = explain.grad_cam(graph, img, target=req.target)
        overlay = explain.render_overlay(img, cam, req.alpha)
        stem = os.path.splitext(os.path.basename(str(path)))[0]
        out_path = os.path.join(req.out, f"{stem}_cam.ppm")
        explain.save_overlay(out_path, overlay)
        outputs.append({
            "image": str(path),
            "overlay": out_path,
            "predicted_class": cam.predicted_class,
            "target_class": cam.target_class,
        })
    return CamResponse(outputs=outputs)
