"""Small models and inputs shared by the network, loss and acceptance tests."""

from __future__ import annotations

import numpy as np

from steptrack import tensor as T
from steptrack.data import Annotation, Frame, Triplet
from steptrack.encodings import compose_train_features, target_state_maps
from steptrack.network import ModelConfig, STEPNet, attention_map
from steptrack.tensor import Tensor, grad_check

TINY = dict(k=2, n=8, heads=2, enc_layers=1, dec_layers=1, ffn_mult=2, s=4, image_size=24, backbone_widths=(4,), head_width=4)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def tiny_model(**overrides) -> STEPNet:
    return STEPNet(tiny_config(**overrides))


def tiny_frame(seed: int, k: int = 2, shift: float = 0.0) -> Frame:
    """A 24x24 frame with one box and k visible keypoints placed off the cell centres."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, size=(3, 24, 24))
    x1, y1 = 4.3 + shift, 5.1
    box = (x1, y1, x1 + 12.2, y1 + 11.4)
    kps = np.column_stack([x1 + rng.uniform(1, 11, k), y1 + rng.uniform(1, 10, k), np.full(k, 2.0)])
    return Frame(image, [Annotation(0, box, kps)], image_id=seed)


def tiny_triplet(k: int = 2) -> Triplet:
    frames = [tiny_frame(i, k, shift=float(i)) for i in range(3)]
    return Triplet(frames[:2], frames[2], 0, (0, 1, 2))


def _probe(out: Tensor, seed: int) -> Tensor:
    """Scalar with a random projection so every output coordinate matters."""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return (out * weights).sum()


def block_cases(model: STEPNet, seed: int = 0):
    """(name, fn, inputs) per network block; fn maps inputs to a scalar."""
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    g = cfg.grid
    image = Tensor(rng.uniform(0, 1, size=(1, 3, cfg.image_size, cfg.image_size)))
    X = Tensor(rng.normal(size=(cfg.n, g, g)))
    z = Tensor(rng.normal(size=(cfg.n, g, g)))
    w1 = Tensor(rng.normal(size=(1, cfg.n)))
    wk = Tensor(rng.normal(size=(cfg.k, cfg.n)))
    soft = Tensor(rng.uniform(0.05, 0.95, size=(cfg.k, g, g)))
    f_train = [Tensor(rng.normal(size=(cfg.n, g, g))) for _ in range(2)]
    maps = target_state_maps(tiny_frame(seed, cfg.k).annotations[0], model.enc_cfg)

    def params(module, limit=4):
        return module.parameters()[:limit]

    cases = [
        ("backbone", lambda x, *p: _probe(model.backbone(x), 1), [image] + params(model.backbone)),
        ("encoder_layer", lambda x, *p: _probe(model.predictor.encoder[0](x), 2), [Tensor(rng.normal(size=(3 * g * g, cfg.n)))] + params(model.predictor.encoder[0])),
        (
            "decoder_layer",
            lambda q, m, *p: _probe(model.predictor.decoder[0](q, m), 3),
            [Tensor(rng.normal(size=(2 + 2 * cfg.k, cfg.n))), Tensor(rng.normal(size=(3 * g * g, cfg.n)))] + params(model.predictor.decoder[0]),
        ),
        ("weight_predictor", lambda a, b, c, *p: _probe(model.predictor([a, b], c)[0], 4) + _probe(model.predictor([a, b], c)[1].w_kp, 5), f_train + [X] + params(model.predictor)),
        ("localizer", lambda w, zz, *p: _probe(model.localizer(w, zz), 6), [w1, z] + params(model.localizer)),
        ("kp_localizer", lambda w, zz, *p: _probe(model.kp_localizer(w, zz), 7), [wk, z] + params(model.kp_localizer)),
        ("bbox_regressor", lambda w, zz, *p: _probe(model.bbox_regressor(w, zz), 8), [w1, z] + params(model.bbox_regressor)),
        ("attention_map", lambda w, zz: _probe(attention_map(w, zz), 9), [wk, z]),
    ]
    if cfg.use_gmsp:
        cases.append(("gmsp", lambda x, *p: _probe(model.gmsp(x), 10), [X] + params(model.gmsp)))
        cases.append(("omra", lambda zz, w, s, *p: _probe(model.omra(zz, w, s), 11), [z, wk, soft] + params(model.omra)))
        cases.append(("compose", lambda x, *p: _probe(compose_train_features(x, maps, model.embeddings, True, soft.data), 12), [X] + model.embeddings.parameters()))
    else:
        cases.append(("omra", lambda zz, w, *p: _probe(model.omra(zz, w, None), 11), [z, wk] + params(model.omra)))
        cases.append(("compose", lambda x, *p: _probe(compose_train_features(x, maps, model.embeddings, False), 12), [X] + model.embeddings.parameters()))
    return cases


def total_loss_case(model: STEPNet):
    """Total training loss on a tiny triplet as a function of a few parameters.

    The composition soft map is a stop-gradient, so the finite-difference
    side holds it at its unperturbed value. GMSP parameters only learn from
    the GMSP term and are checked against that term alone.
    """
    from steptrack.losses import LossWeights
    from steptrack.trainer import forward_loss

    triplet = tiny_triplet(model.cfg.k)
    chosen = [model.bbox_regressor.out.weight, model.omra.out.weight, model.localizer.out.bias, model.predictor.queries, model.backbone.blocks[0].conv.weight]
    cases = []
    if model.gmsp is not None:
        with T.no_grad():
            held = _held_condition(model, triplet)
        model.gmsp_condition = lambda _soft: held
        only_gmsp = LossWeights(0.0, 0.0, 0.0, 0.0, 100.0)
        cases.append((lambda *_: forward_loss(model, triplet, only_gmsp).graph, [model.gmsp.out.weight, model.gmsp.enc1.conv.weight]))
    cases.insert(0, (lambda *_: forward_loss(model, triplet, LossWeights()).graph, chosen))
    return cases


def _held_condition(model: STEPNet, triplet: Triplet) -> np.ndarray:
    images = np.stack([f.image for f in triplet.train])
    return model.gmsp(model.features(images)).data.copy()


def run_grad_checks(model: STEPNet, max_coords: int = 12) -> dict[str, float]:
    """Worst relative error per block plus the total loss."""
    errors = {}
    for name, fn, inputs in block_cases(model):
        errors[name] = grad_check(fn, inputs, h=1e-5, max_coords=max_coords).max_rel_error
    worst = 0.0
    for fn, inputs in total_loss_case(model):
        worst = max(worst, grad_check(fn, inputs, h=1e-5, max_coords=max_coords).max_rel_error)
    errors["total_loss"] = worst
    return errors

