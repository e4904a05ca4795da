"""Byte-stable JSON emission for persisted artifacts."""

import json

import numpy as np


def _fmt_float(x):
    return format(float(x), ".17g")


def dump_json(obj, indent=1):
    """Serialize nested dict/list/scalar data with %.17g floats.

    The stdlib encoder formats floats with repr, which is shortest
    round-trip rather than fixed precision; artifacts pin 17 significant
    digits so reruns compare byte-identically.
    """
    def ser(o, depth):
        pad = " " * (indent * depth)
        pad_in = " " * (indent * (depth + 1))
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad_in}{json.dumps(str(k))}: {ser(v, depth + 1)}"
                     for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if isinstance(o, (list, tuple, np.ndarray)):
            seq = o.tolist() if isinstance(o, np.ndarray) else list(o)
            if not seq:
                return "[]"
            flat = all(isinstance(v, (int, float, np.integer, np.floating, str,
                                      bool, type(None))) for v in seq)
            parts = [ser(v, depth + 1) for v in seq]
            if flat:
                return "[" + ", ".join(parts) + "]"
            return ("[\n" + ",\n".join(pad_in + p for p in parts)
                    + "\n" + pad + "]")
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt_float(o)
        if isinstance(o, str):
            return json.dumps(o)
        raise TypeError(f"cannot serialize {type(o)!r}")

    return ser(obj, 0)
