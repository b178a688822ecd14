"""JSON checkpoints for trained and quantized models.

One file holds a header (model_type, dims, gate order), every tensor as a
row-major nested list, optionally the vocabulary, and for quantized
models the per-tensor and per-site quantization parameters plus the
retained full-precision final layer. Floats survive the trip exactly:
float32 widens to a JSON double and narrows back without rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Vocab
from .models import DiscModel, GenModel
from .nn import LstmParams
from .quant import QuantParams, QuantSpec, QuantizedModel

CHECKPOINT_VERSION = 1
GATE_ORDER = "ifgo"


def _header(model) -> dict:
    head = {
        "version": CHECKPOINT_VERSION,
        "model_type": model.model_type,
        "vocab_size": model.vocab_size,
        "embedding_dim": model.embedding.shape[1],
        "hidden_dim": model.lstm.hidden_size,
        "num_classes": model.num_classes,
        "label_dim": (model.label_embedding.shape[1]
                      if model.model_type == "gen" else None),
        "gate_order": GATE_ORDER,
    }
    return head


def _tensor_block(model) -> dict:
    return {name: tensor.tolist() for name, tensor in model.tensors().items()}


def _vocab_block(vocab: Vocab) -> dict:
    return {"id_to_token": list(vocab.id_to_token), "pad_id": vocab.pad_id,
            "unk_id": vocab.unk_id}


def _params_block(params: QuantParams) -> dict:
    return {"scale": params.scale, "zero_point": params.zero_point,
            "qmin": params.qmin, "qmax": params.qmax,
            "bitwidth": params.bitwidth}


def _spec_block(spec: QuantSpec) -> dict:
    return {"bitwidth": spec.bitwidth, "signed": spec.signed,
            "symmetric": spec.symmetric, "scale_method": spec.scale_method,
            "percentile": spec.percentile}


@dataclass
class LoadedCheckpoint:
    """What a checkpoint file decodes to."""

    model: DiscModel | GenModel
    vocab: Vocab | None = None
    quantized: QuantizedModel | None = None
    extra: dict | None = None

    @property
    def best(self):
        """The quantized model when present, else the plain model."""
        return self.quantized if self.quantized is not None else self.model


def save_checkpoint(path, model, vocab: Vocab | None = None,
                    extra: dict | None = None) -> None:
    """Write a full-precision model (and optionally its vocabulary)."""
    payload = {"header": _header(model), "tensors": _tensor_block(model)}
    if vocab is not None:
        payload["vocab"] = _vocab_block(vocab)
    if extra:
        payload["extra"] = extra
    _write(path, payload)


def save_quantized_checkpoint(path, qmodel: QuantizedModel,
                              vocab: Vocab | None = None,
                              extra: dict | None = None) -> None:
    """Write a quantized model with its quantization parameter blocks."""
    payload = {
        "header": _header(qmodel.model),
        "tensors": _tensor_block(qmodel.model),
        "quant": {
            "spec": _spec_block(qmodel.spec),
            "passthrough": qmodel.passthrough,
            "weight_params": {name: _params_block(p)
                              for name, p in qmodel.weight_params.items()},
            "act_params": {site: _params_block(p)
                           for site, p in qmodel.act_params.items()},
            "fp_final_layer": qmodel.fp_final_layer.tolist(),
        },
    }
    if vocab is not None:
        payload["vocab"] = _vocab_block(vocab)
    if extra:
        payload["extra"] = extra
    _write(path, payload)


def _write(path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text, encoding="utf-8")


def _build_model(header: dict, tensors: dict):
    def arr(name):
        return np.asarray(tensors[name], dtype=np.float32)

    lstm = LstmParams(w_x=arr("lstm_w_x"), w_h=arr("lstm_w_h"),
                      b=arr("lstm_b"))
    if header["model_type"] == "disc":
        return DiscModel(embedding=arr("embedding"), lstm=lstm,
                         head_w=arr("head_w"), head_b=arr("head_b"))
    return GenModel(embedding=arr("embedding"),
                    label_embedding=arr("label_embedding"), lstm=lstm,
                    decoder_w=arr("decoder_w"), decoder_b=arr("decoder_b"))


def _build_params(block: dict) -> QuantParams:
    return QuantParams(scale=block["scale"], zero_point=block["zero_point"],
                       qmin=block["qmin"], qmax=block["qmax"],
                       bitwidth=block["bitwidth"])


def load_checkpoint(path) -> LoadedCheckpoint:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    header = payload["header"]
    if header.get("gate_order") != GATE_ORDER:
        raise ValueError(f"unsupported gate order {header.get('gate_order')!r}")
    model = _build_model(header, payload["tensors"])

    vocab = None
    if "vocab" in payload:
        block = payload["vocab"]
        tokens = block["id_to_token"]
        vocab = Vocab(token_to_id={t: i for i, t in enumerate(tokens)},
                      id_to_token=list(tokens), pad_id=block["pad_id"],
                      unk_id=block["unk_id"])

    quantized = None
    if "quant" in payload:
        q = payload["quant"]
        spec = QuantSpec(bitwidth=q["spec"]["bitwidth"],
                         signed=q["spec"]["signed"],
                         symmetric=q["spec"]["symmetric"],
                         scale_method=q["spec"]["scale_method"],
                         percentile=q["spec"]["percentile"])
        quantized = QuantizedModel(
            model=model,
            spec=spec,
            weight_params={name: _build_params(p)
                           for name, p in q["weight_params"].items()},
            fp_final_layer=np.asarray(q["fp_final_layer"], dtype=np.float32),
            act_params={site: _build_params(p)
                        for site, p in q["act_params"].items()},
            passthrough=q["passthrough"],
        )
    return LoadedCheckpoint(model=model, vocab=vocab, quantized=quantized,
                            extra=payload.get("extra"))
