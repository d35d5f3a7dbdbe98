"""Line-delimited JSON metrics: one header object, then one record per line."""
import json
import math
from pathlib import Path

RECORD_FIELDS = (
    "step", "loss_mf", "loss_actor", "loss_critic", "q_mean",
    "latent_norm_mean", "latent_norm_max", "latent_sqnorm_dev_max",
    "eval_return_mean", "eval_success_rate", "ood_fraction", "wall_time_s",
)


class MetricsParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def _clean(value):
    # json has no NaN; non-finite numbers are written as null
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, "item"):
        return _clean(value.item())
    return value


def make_record(step, **values):
    unknown = set(values) - set(RECORD_FIELDS)
    if unknown:
        raise ValueError(f"unknown metrics fields {sorted(unknown)}")
    rec = {name: None for name in RECORD_FIELDS}
    rec.update({k: _clean(v) for k, v in values.items()})
    rec["step"] = int(step)
    return rec


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class MetricsWriter:
    """Append-only writer that refuses non-increasing steps."""

    def __init__(self, path, header=None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        self.last_step = None
        if header is not None:
            self._fh.write(_dump(dict(type="header", **header)) + "\n")
            self._fh.flush()

    def emit(self, record):
        step = record["step"]
        if self.last_step is not None and step <= self.last_step:
            raise ValueError(f"metrics step {step} does not follow {self.last_step}")
        self.last_step = step
        self._fh.write(_dump(dict(type="record", **record)) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_metrics(writer, record):
    writer.emit(record)


def read_metrics(path):
    """Return ``(header, records)``; the header is ``None`` if absent."""
    header, records, last = None, [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsParseError(path, lineno, f"malformed line ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MetricsParseError(path, lineno, "expected an object")
            kind = obj.pop("type", "record")
            if kind == "header":
                if header is not None or records:
                    raise MetricsParseError(path, lineno, "header must be the first line")
                header = obj
                continue
            if not isinstance(obj.get("step"), int):
                raise MetricsParseError(path, lineno, "record without an integer step")
            if last is not None and obj["step"] <= last:
                raise MetricsParseError(path, lineno, f"step {obj['step']} does not follow {last}")
            last = obj["step"]
            records.append(obj)
    return header, records


def series(records, name):
    return [r.get(name) for r in records]
