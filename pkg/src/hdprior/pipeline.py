"""Filesystem-composed pipeline steps behind the command-line interface.

A run directory holds::

    corpus/   manifest.tsv, clean/*.ppm, degraded/*.ppm, truth/*.tnsr, labels/*.txt, scores.tsv
    maps/     <id>.tnsr (transmission, airlight), summary.tsv
    partition/ hd_u.idx ... ld_f.idx with matching .tnsr pixel dumps, counts.txt
    train/    extractor.tnsr, rftm.tnsr, report.txt
    finetune/ fs_head.tnsr, report.txt, control_report.txt, summary.txt
    analyze/  gap.txt, embedding.tsv
    sweep/    sweep.tsv

Each step writes ``config.txt`` (the effective configuration) next to its
outputs. Wall-clock times are only logged, so every emitted file is
byte-identical across reruns with the same seed.
"""

import dataclasses
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from . import imaging, tnsr
from .analysis import (FeatureCloud, gap_report, paired_margin_null, pool_feature_maps,
                       tsne_embed, write_embedding)
from .errors import FormatError, ParameterError
from .extractor import ExtractorConfig, load_weights, pretrain_extractor, save_weights
from .partition import (DfuiGate, extract_patches, read_index, read_scores, select_dfui,
                        split_hd_ld, write_index, write_scores)
from .rftm import init_rftm, load_rftm, residual_from_features, save_rftm
from .training import finetune, stage_features, train_rftm

logger = logging.getLogger(__name__)

SOURCES = ("u", "f")
SETS = ("hd_u", "ld_u", "hd_f", "ld_f")


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, producer):
        super().__init__(f"missing {path}; run `hdprior {producer}` first")
        self.path = path
        self.producer = producer


def _require(path, producer):
    if not os.path.exists(path):
        raise MissingArtifact(path, producer)
    return path


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _echo_config(d, cfg, extra=""):
    _write_text(os.path.join(d, "config.txt"), cfg.to_text() + extra)


def _timing(d, seconds):
    # logged rather than written so every emitted file is reproducible
    logger.info("%s: %.1f s", os.path.basename(d), seconds)


def _image_seed(seed, source, k):
    return int(np.random.SeedSequence([seed, SOURCES.index(source), k]).generate_state(1)[0])


def proxy_ap(airlight):
    """Stand-in detector score: neutral airlight reads as detector friendly."""
    a = np.asarray(airlight, dtype=np.float64)
    return float(np.clip(90.0 - 100.0 * (a.max() - a.min()), 0.0, 100.0))


@dataclass
class Scene:
    image_id: str
    source: str
    seed: int
    clean: np.ndarray
    transmission: np.ndarray
    airlight: np.ndarray
    degraded: np.ndarray
    labels: list
    score: float


def render_scene(cfg, source, k):
    s = cfg.synth
    seed = _image_seed(cfg.seed, source, k)
    rng = np.random.default_rng(seed)
    J, labels = imaging.synth_scene(seed, s.height, s.width, s.classes, s.dark_fraction,
                                    color_jitter=s.color_jitter)
    t = imaging.synth_transmission(seed + 1, s.height, s.width, s.t_low, s.t_high)
    murky = source == "f" and rng.random() < s.murky_fraction
    base = s.u_airlight if source == "u" or murky else s.f_airlight
    A = imaging.as_airlight(np.asarray(base) + rng.normal(0.0, s.airlight_jitter, 3))
    I = imaging.degrade(J, t, A)
    return Scene(f"{source}{k:04d}", source, seed, J, t, A, I, labels, proxy_ap(A))


# -- synth / estimate / partition ------------------------------------------------

def cmd_synth(cfg, out):
    d = os.path.join(out, "corpus")
    for sub in ("clean", "degraded", "truth", "labels"):
        os.makedirs(os.path.join(d, sub), exist_ok=True)
    manifest, scores = [], {}
    for source in SOURCES:
        for k in range(cfg.synth.n_images):
            sc = render_scene(cfg, source, k)
            imaging.write_ppm(os.path.join(d, "clean", sc.image_id + ".ppm"), sc.clean)
            imaging.write_ppm(os.path.join(d, "degraded", sc.image_id + ".ppm"), sc.degraded)
            tnsr.save(os.path.join(d, "truth", sc.image_id + ".tnsr"),
                      {"transmission": sc.transmission, "airlight": sc.airlight})
            imaging.write_labels(os.path.join(d, "labels", sc.image_id + ".txt"), sc.labels)
            manifest.append(f"{sc.image_id}\t{source}\t{sc.seed}")
            if source == "f":
                scores[sc.image_id] = sc.score
    _write_text(os.path.join(d, "manifest.tsv"), "".join(m + "\n" for m in manifest))
    write_scores(os.path.join(d, "scores.tsv"), scores)
    _echo_config(d, cfg)
    return len(manifest)


def read_manifest(out):
    path = _require(os.path.join(out, "corpus", "manifest.tsv"), "synth")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                image_id, source, seed = line.rstrip("\n").split("\t")
                rows.append((image_id, source, int(seed)))
    return rows


def cmd_estimate(cfg, out, input_dir=None):
    """UDCP transmission + airlight for every PPM in ``input_dir``.

    Returns the list of ``(file, error)`` pairs for files that failed; the
    remaining files are still processed.
    """
    src = input_dir or os.path.join(out, "corpus", "degraded")
    if not os.path.isdir(src):
        raise MissingArtifact(src, "synth")
    names = sorted(f for f in os.listdir(src) if f.endswith(".ppm"))
    if not names:
        raise ParameterError(f"no .ppm files in {src}")
    d = os.path.join(out, "maps")
    os.makedirs(d, exist_ok=True)
    summary, errors = [], []
    win, omega = cfg.imaging.window, cfg.imaging.omega
    for name in names:
        try:
            I = imaging.read_ppm(os.path.join(src, name))
        except (FormatError, OSError) as exc:
            errors.append((name, str(exc)))
            logger.error("%s: %s", name, exc)
            continue
        A = imaging.estimate_airlight(I, win)
        t = imaging.estimate_transmission(I, A, win, omega)
        stem = name[:-4]
        tnsr.save(os.path.join(d, stem + ".tnsr"), {"transmission": t, "airlight": A})
        summary.append(f"{stem}\t{float(t.astype(np.float32).mean())!r}\n")
    _write_text(os.path.join(d, "summary.tsv"), "".join(summary))
    _echo_config(d, cfg)
    return errors


def load_map(out, image_id):
    return tnsr.load(_require(os.path.join(out, "maps", image_id + ".tnsr"), "estimate"))


def patch_label(patch, labels):
    for l in labels:
        if (patch.x <= l.x and l.x + l.w <= patch.x + patch.size
                and patch.y <= l.y and l.y + l.h <= patch.y + patch.size):
            return l.class_id
    return -1


def cmd_partition(cfg, out):
    rows = read_manifest(out)
    pc = cfg.partition
    keep_f = None
    if pc.use_gate:
        scores_path = os.path.join(out, "corpus", "scores.tsv")
        if os.path.exists(scores_path):
            keep_f = set(select_dfui(DfuiGate(read_scores(scores_path), pc.gate_threshold)))
    missing = [r[0] for r in rows if not os.path.exists(os.path.join(out, "maps", r[0] + ".tnsr"))]
    if missing:
        raise MissingArtifact(", ".join(os.path.join(out, "maps", m + ".tnsr") for m in missing[:5])
                              + (" ..." if len(missing) > 5 else ""), "estimate")
    sets = {k: [] for k in SETS}
    pixels = {k: [] for k in SETS}
    gated = 0
    for image_id, source, _ in rows:
        if source == "f" and keep_f is not None and image_id not in keep_f:
            gated += 1
            continue
        I = imaging.read_ppm(os.path.join(out, "corpus", "degraded", image_id + ".ppm"))
        t = load_map(out, image_id)["transmission"]
        patches = extract_patches(I, t, pc.patch_size, pc.stride, image_id, source, pc.aggregate)
        hd, ld = split_hd_ld(patches, pc.threshold)
        for label, group in (("hd", hd), ("ld", ld)):
            key = f"{label}_{source}"
            sets[key].extend(group)
            pixels[key].extend(p.window(I) for p in group)
    d = os.path.join(out, "partition")
    os.makedirs(d, exist_ok=True)
    for key in SETS:
        write_index(os.path.join(d, key + ".idx"), sets[key])
        size = pc.patch_size
        arr = np.stack(pixels[key]) if pixels[key] else np.zeros((0, 3, size, size), np.float32)
        tnsr.save(os.path.join(d, key + ".tnsr"), {"pixels": arr})
    counts = {k: len(v) for k, v in sets.items()}
    counts["gated_f"] = gated
    _write_text(os.path.join(d, "counts.txt"), "".join(f"{k}={v}\n" for k, v in counts.items()))
    _echo_config(d, cfg)
    return counts


# -- patch corpus shared by train / finetune / analyze / sweep -------------------

@dataclass
class PatchCorpus:
    """Every partitioned patch of both sources with pixels and class labels."""
    patches: dict  # source -> list[Patch]
    pixels: dict   # source -> (n, 3, s, s)
    labels: dict   # source -> (n,) class id or -1

    def hd_ld(self, source, T, cap=None, seed=0):
        """Indices of HD and LD patches of ``source`` for threshold ``T``.

        With ``cap`` set, larger HD sets are cut to a seeded subsample of
        ``cap`` indices (kept in corpus order).
        """
        mt = np.array([p.mean_t for p in self.patches[source]])
        hd = np.flatnonzero(mt < T)
        ld = np.flatnonzero(~(mt < T))
        if cap and len(hd) > cap:
            rng = np.random.default_rng([seed, SOURCES.index(source)])
            hd = np.sort(rng.choice(hd, size=cap, replace=False))
        return hd, ld


def load_patch_corpus(out):
    d = os.path.join(out, "partition")
    patches, pixels, labels = {}, {}, {}
    label_cache = {}
    for source in SOURCES:
        ps, px = [], []
        for level in ("hd", "ld"):
            key = f"{level}_{source}"
            ps.extend(read_index(_require(os.path.join(d, key + ".idx"), "partition")))
            px.append(tnsr.load(_require(os.path.join(d, key + ".tnsr"), "partition"))["pixels"])
        order = sorted(range(len(ps)), key=lambda i: (ps[i].image_id, ps[i].y, ps[i].x))
        patches[source] = [ps[i] for i in order]
        pixels[source] = np.concatenate(px)[order]
        labs = []
        for p in patches[source]:
            if p.image_id not in label_cache:
                label_cache[p.image_id] = imaging.read_labels(
                    os.path.join(out, "corpus", "labels", p.image_id + ".txt"))
            labs.append(patch_label(p, label_cache[p.image_id]))
        labels[source] = np.array(labs, dtype=np.int64)
    return PatchCorpus(patches, pixels, labels)


def clean_training_patches(out, cfg):
    """Clean-scene crops of every labelled grid cell, for extractor pretraining."""
    size = cfg.partition.patch_size
    xs, ys = [], []
    for image_id, _, _ in read_manifest(out):
        J = imaging.read_ppm(os.path.join(out, "corpus", "clean", image_id + ".ppm"))
        labels = imaging.read_labels(os.path.join(out, "corpus", "labels", image_id + ".txt"))
        for p in extract_patches(J, np.zeros(J.shape[1:]), size, cfg.partition.stride, image_id):
            c = patch_label(p, labels)
            if c >= 0:
                xs.append(p.window(J))
                ys.append(c)
    return np.stack(xs), np.array(ys, dtype=np.int64)


def build_extractor(out, cfg):
    path = os.path.join(out, "train", "extractor.tnsr")
    meta_path = os.path.join(out, "train", "extractor_meta.txt")
    if os.path.exists(path):
        w = load_weights(path)
        if os.path.exists(meta_path):
            with open(meta_path, encoding="utf-8") as fh:
                for line in fh:
                    k, _, v = line.strip().partition("=")
                    if k:
                        w.meta[k] = float(v)
        return w
    e = cfg.extractor
    x, y = clean_training_patches(out, cfg)
    w = pretrain_extractor(x, y, ExtractorConfig(3, e.c0, e.c1), seed=cfg.seed,
                           iterations=e.pretrain_iters, batch_size=e.pretrain_batch, lr=e.pretrain_lr)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_weights(path, w)
    _write_text(meta_path, "".join(f"{k}={v!r}\n" for k, v in sorted(w.meta.items())))
    return build_extractor(out, cfg)


def fresh_rftm(cfg, mode=None):
    r = cfg.rftm
    return init_rftm(cfg.extractor.c0, cfg.extractor.c1, seed=cfg.seed, mode=mode or r.init,
                     cmid=r.cmid or None, kernel=r.kernel, layers=r.layers)


class FeatureBank:
    """Frozen PS0/PS1 features of every patch, computed once per extractor."""

    def __init__(self, corpus, w):
        self.f0, self.f1 = {}, {}
        for source in SOURCES:
            self.f0[source], self.f1[source] = stage_features(corpus.pixels[source], w)


def stage1(corpus, bank, w, cfg, T):
    hd_u, _ = corpus.hd_ld("u", T, cfg.partition.max_hd, cfg.seed)
    hd_f, _ = corpus.hd_ld("f", T, cfg.partition.max_hd, cfg.seed)
    feats = (bank.f0["u"][hd_u], bank.f1["u"][hd_u], bank.f1["f"][hd_f])
    return train_rftm(corpus.pixels["u"][hd_u], corpus.pixels["f"][hd_f], w, fresh_rftm(cfg),
                      cfg.train, features=feats)


def stage2(corpus, bank, w, p, cfg):
    labelled = np.flatnonzero(corpus.labels["u"] >= 0)
    feats = (bank.f0["u"][labelled], bank.f1["u"][labelled])
    return finetune(corpus.pixels["u"][labelled], corpus.labels["u"][labelled], w, p, cfg.train,
                    n_classes=cfg.synth.classes, features=feats)


def clouds(corpus, bank, p, T, cap=None, seed=0):
    hd_u, ld_u = corpus.hd_ld("u", T, cap, seed)
    hd_f, ld_f = corpus.hd_ld("f", T, cap, seed)
    tu = residual_from_features(bank.f0["u"][hd_u], bank.f1["u"][hd_u], p)
    return {"HD_f": pool_feature_maps(bank.f1["f"][hd_f], "HD_f"),
            "HD_u": pool_feature_maps(bank.f1["u"][hd_u], "HD_u"),
            "HD_tu": pool_feature_maps(tu, "HD_tu"),
            "LD_f": pool_feature_maps(bank.f1["f"][ld_f], "LD_f"),
            "LD_u": pool_feature_maps(bank.f1["u"][ld_u], "LD_u")}


def analyse(corpus, bank, p, cfg, T):
    c = clouds(corpus, bank, p, T, cfg.partition.max_hd, cfg.seed)
    rep = gap_report(c["HD_f"], c["HD_u"], c["HD_tu"], c["LD_f"], c["LD_u"])
    null = paired_margin_null(c["HD_u"], c["HD_tu"], c["HD_f"], cfg.analysis.permutations,
                              cfg.seed, rep.bandwidth)
    return rep, float(np.quantile(null, 0.95)), c


# -- train / finetune / analyze / sweep ----------------------------------------

def cmd_train(cfg, out):
    t0 = time.perf_counter()
    corpus = load_patch_corpus(out)
    w = build_extractor(out, cfg)
    bank = FeatureBank(corpus, w)
    p, report = stage1(corpus, bank, w, cfg, cfg.partition.threshold)
    d = os.path.join(out, "train")
    save_rftm(os.path.join(d, "rftm.tnsr"), p)
    report.metrics["pretrain_accuracy"] = w.meta.get("pretrain_accuracy", float("nan"))
    report.write(os.path.join(d, "report.txt"))
    _echo_config(d, cfg)
    _timing(d, time.perf_counter() - t0)
    return report


def _trained(out):
    w = load_weights(_require(os.path.join(out, "train", "extractor.tnsr"), "train"))
    p = load_rftm(_require(os.path.join(out, "train", "rftm.tnsr"), "train"))
    return w, p


def paired_finetune(corpus, bank, w, p, cfg, reps):
    """Stage 2 with ``p`` and with a zero-residual control, seeds ``cfg.seed + r``.

    Returns ``[(trained_report, control_report, fs, head), ...]``; each pair
    shares its held-out split and batch order.
    """
    control = fresh_rftm(cfg, "zero-residual")
    out = []
    for r in range(reps):
        c = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=cfg.seed + r))
        fs, head, rep = stage2(corpus, bank, w, p, c)
        ctl = stage2(corpus, bank, w, control, c)[2]
        out.append((rep, ctl, fs, head))
    return out


def cmd_finetune(cfg, out, reps=3):
    """Stage 2: trained RFTM vs zero-residual control over ``reps`` paired seeds."""
    t0 = time.perf_counter()
    corpus = load_patch_corpus(out)
    w, p = _trained(out)
    bank = FeatureBank(corpus, w)
    runs = paired_finetune(corpus, bank, w, p, cfg, reps)
    rep, ctl, fs, head = runs[0]
    d = os.path.join(out, "finetune")
    os.makedirs(d, exist_ok=True)
    tnsr.save(os.path.join(d, "fs_head.tnsr"), {"fs.weight": fs.weight, "fs.bias": fs.bias,
                                               "head.weight": head.weight, "head.bias": head.bias})
    rep.write(os.path.join(d, "report.txt"))
    ctl.write(os.path.join(d, "control_report.txt"))
    lines, wins = [], 0
    for r, (a, b, _, _) in enumerate(runs):
        acc, base = a.metrics["held_out_accuracy"], b.metrics["held_out_accuracy"]
        wins += acc >= base
        lines.append(f"rep{r}_seed={cfg.seed + r}\nrep{r}_trained={acc!r}\nrep{r}_control={base!r}\n")
    lines.append(f"trained_ge_control={wins}/{reps}\n"
                 f"majority={'yes' if 2 * wins > reps else 'no'}\n")
    _write_text(os.path.join(d, "summary.txt"), "".join(lines))
    _echo_config(d, cfg)
    _timing(d, time.perf_counter() - t0)
    return runs


def cmd_analyze(cfg, out):
    t0 = time.perf_counter()
    corpus = load_patch_corpus(out)
    w, p = _trained(out)
    bank = FeatureBank(corpus, w)
    rep, null95, c = analyse(corpus, bank, p, cfg, cfg.partition.threshold)
    d = os.path.join(out, "analyze")
    _write_text(os.path.join(d, "gap.txt"), rep.to_text() + f"null95={null95!r}\n"
                f"margin_exceeds_null95={'yes' if rep.margin > null95 else 'no'}\n")
    pts = np.concatenate([c[k].vectors for k in ("HD_f", "HD_u", "HD_tu")])
    tags = sum(([k] * len(c[k]) for k in ("HD_f", "HD_u", "HD_tu")), [])
    if len(pts) >= 5 and cfg.analysis.perplexity < (len(pts) - 1) / 3:
        emb = tsne_embed(pts, cfg.analysis.perplexity, cfg.analysis.tsne_iters, cfg.seed)
        write_embedding(os.path.join(d, "embedding.tsv"), emb.embedding, tags,
                        header=f"x\ty\ttag\tkl={emb.kl!r}")
    _echo_config(d, cfg)
    _timing(d, time.perf_counter() - t0)
    return rep, null95


SWEEP_HEADER = "T\tn_hd_u\tn_hd_f\tfinal_kl\tmmd_hd_u_f\tmmd_hd_tu_f\tgap_reduced\tproxy_accuracy\tstatus"


def sweep_rows(corpus, bank, w, cfg, thresholds):
    rows = []
    for T in thresholds:
        n_u = len(corpus.hd_ld("u", T, cfg.partition.max_hd, cfg.seed)[0])
        n_f = len(corpus.hd_ld("f", T, cfg.partition.max_hd, cfg.seed)[0])
        if n_u == 0 or n_f == 0:
            rows.append((T, n_u, n_f, float("nan"), float("nan"), float("nan"), "-", float("nan"),
                         "skipped:empty_hd"))
            continue
        p, rep = stage1(corpus, bank, w, cfg, T)
        if n_u >= 2 and n_f >= 2:
            gap, _, _ = analyse(corpus, bank, p, dataclasses.replace(
                cfg, analysis=dataclasses.replace(cfg.analysis, permutations=1)), T)
            g = (gap.mmd_hd_u_f, gap.mmd_hd_tu_f, "yes" if gap.gap_reduced else "no")
        else:
            g = (float("nan"), float("nan"), "-")
        _, _, ft = stage2(corpus, bank, w, p, cfg)
        rows.append((T, n_u, n_f, rep.metrics["smoothed_final"], *g,
                     ft.metrics["held_out_accuracy"], "ok"))
    return rows


def format_sweep(rows):
    lines = ["# " + SWEEP_HEADER]
    for r in rows:
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in r))
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg, out):
    t0 = time.perf_counter()
    corpus = load_patch_corpus(out)
    w = build_extractor(out, cfg)
    bank = FeatureBank(corpus, w)
    rows = sweep_rows(corpus, bank, w, cfg, cfg.sweep.thresholds)
    d = os.path.join(out, "sweep")
    _write_text(os.path.join(d, "sweep.tsv"), format_sweep(rows))
    ok = [r for r in rows if r[-1] == "ok"]
    best = max(ok, key=lambda r: r[7]) if ok else None
    note = "" if best is None else (f"best_T={best[0]!r}\nbest_accuracy={best[7]!r}\n"
                                    f"medium_T_best={'yes' if 0.4 <= best[0] <= 0.7 else 'no'}\n")
    _write_text(os.path.join(d, "summary.txt"), note)
    _echo_config(d, cfg)
    _timing(d, time.perf_counter() - t0)
    return rows
