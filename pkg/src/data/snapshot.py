"""
CSV snapshot of a DatasetBundle.

Layout: header `split,id,label,x0,...,x{d_in-1}`, then one row per sample.
`split` is one of source, target_labeled, target_unlabeled, target_test;
`label` of target_unlabeled rows is the audit label. Floats are written
with repr() so a load reproduces the bundle bit for bit. The generator
spec, when known, is echoed next to the CSV as `<path>.spec.yaml`.
"""

import csv
import logging
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import yaml

from src.core.exceptions import ParseError, StorageError
from src.core.schemas import DatasetConfig
from src.data.datasets import AuditLabels, DatasetBundle, LabeledSet, UnlabeledSet
from src.shared.utils import performance_monitor

logger = logging.getLogger(__name__)

SPLITS = ('source', 'target_labeled', 'target_unlabeled', 'target_test')
FIXED_COLUMNS = ['split', 'id', 'label']


def spec_path_for(path: Path) -> Path:
    return path.with_name(path.name + '.spec.yaml')


def _rows(bundle: DatasetBundle):
    audit_ids, audit_labels = bundle.audit.as_arrays()
    audit = dict(zip(audit_ids.tolist(), audit_labels.tolist()))
    for split, part in (('source', bundle.source), ('target_labeled', bundle.target_labeled)):
        for i, y, x in zip(part.ids, part.labels, part.X):
            yield split, int(i), int(y), x
    for i, x in zip(bundle.target_unlabeled.ids, bundle.target_unlabeled.X):
        yield 'target_unlabeled', int(i), audit[int(i)], x
    for i, y, x in zip(bundle.target_test.ids, bundle.target_test.labels, bundle.target_test.X):
        yield 'target_test', int(i), int(y), x


@performance_monitor('snapshot write', logger)
def snapshot(bundle: DatasetBundle, path) -> Path:
    path = Path(path)
    header = FIXED_COLUMNS + [f'x{j}' for j in range(bundle.d_in)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for split, sample_id, label, x in _rows(bundle):
                writer.writerow([split, sample_id, label] + [repr(float(v)) for v in x])
        if bundle.spec is not None:
            with open(spec_path_for(path), 'w', encoding='utf-8') as f:
                yaml.safe_dump({'dataset': asdict(bundle.spec), 'n_classes': bundle.n_classes}, f,
                               sort_keys=True)
    except OSError as e:
        raise StorageError(f"cannot write snapshot {path}: {e}")

    logger.info(f"Wrote dataset snapshot to {path}")
    return path


def _parse_header(header: List[str]) -> int:
    for position, expected in enumerate(FIXED_COLUMNS):
        if position >= len(header) or header[position] != expected:
            found = header[position] if position < len(header) else '<missing>'
            raise ParseError(f"expected column '{expected}', found '{found}'", line=1, column=expected)
    d_in = len(header) - len(FIXED_COLUMNS)
    if d_in < 1:
        raise ParseError("no feature columns", line=1, column='x0')
    for j, name in enumerate(header[len(FIXED_COLUMNS):]):
        if name != f'x{j}':
            raise ParseError(f"expected column 'x{j}', found '{name}'", line=1, column=f'x{j}')
    return d_in


@performance_monitor('snapshot load', logger)
def load(path) -> DatasetBundle:
    path = Path(path)
    try:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            lines = list(csv.reader(f))
    except OSError as e:
        raise StorageError(f"cannot read snapshot {path}: {e}")

    if not lines:
        raise ParseError("empty snapshot file", line=1)
    header = lines[0]
    d_in = _parse_header(header)

    parts: Dict[str, Tuple[List[int], List[int], List[List[float]]]] = {s: ([], [], []) for s in SPLITS}
    for line_no, row in enumerate(lines[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            column = header[len(row)] if len(row) < len(header) else f'x{len(row) - len(FIXED_COLUMNS) - 1}'
            raise ParseError(f"expected {len(header)} columns, got {len(row)} (column '{column}')",
                             line=line_no, column=column)
        split = row[0]
        if split not in parts:
            raise ParseError(f"unknown split '{split}'", line=line_no, column='split')
        try:
            sample_id = int(row[1])
        except ValueError:
            raise ParseError(f"invalid id '{row[1]}'", line=line_no, column='id')
        try:
            label = int(row[2])
        except ValueError:
            raise ParseError(f"invalid label '{row[2]}'", line=line_no, column='label')
        features = []
        for j, text in enumerate(row[3:]):
            try:
                features.append(float(text))
            except ValueError:
                raise ParseError(f"invalid float '{text}'", line=line_no, column=f'x{j}')
        ids, labels, X = parts[split]
        ids.append(sample_id)
        labels.append(label)
        X.append(features)

    def arrays(split):
        ids, labels, X = parts[split]
        return (np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64),
                np.asarray(X, dtype=np.float64).reshape(len(ids), d_in))

    spec, n_classes = _load_spec(path)
    src_ids, src_labels, src_X = arrays('source')
    lab_ids, lab_labels, lab_X = arrays('target_labeled')
    unl_ids, unl_labels, unl_X = arrays('target_unlabeled')
    test_ids, test_labels, test_X = arrays('target_test')
    if n_classes is None:
        n_classes = int(max(src_labels.max(initial=-1), lab_labels.max(initial=-1))) + 1

    return DatasetBundle(
        source=LabeledSet(src_ids, src_X, src_labels),
        target_unlabeled=UnlabeledSet(unl_ids, unl_X),
        target_labeled=LabeledSet(lab_ids, lab_X, lab_labels),
        target_test=LabeledSet(test_ids, test_X, test_labels),
        audit=AuditLabels(unl_ids, unl_labels),
        n_classes=n_classes,
        spec=spec,
    )


def _load_spec(path: Path):
    spec_file = spec_path_for(path)
    if not spec_file.exists():
        return None, None
    try:
        with open(spec_file, 'r', encoding='utf-8') as f:
            content = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise StorageError(f"cannot read spec echo {spec_file}: {e}")
    known = {f.name for f in fields(DatasetConfig)}
    spec = DatasetConfig(**{k: v for k, v in content.get('dataset', {}).items() if k in known})
    return spec, content.get('n_classes')


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    """Exact equality of every split, including audit labels"""
    def same_labeled(x: LabeledSet, y: LabeledSet) -> bool:
        return (np.array_equal(x.ids, y.ids) and np.array_equal(x.labels, y.labels)
                and np.array_equal(x.X, y.X))

    a_ids, a_labels = a.audit.as_arrays()
    b_ids, b_labels = b.audit.as_arrays()
    return (a.n_classes == b.n_classes
            and same_labeled(a.source, b.source)
            and same_labeled(a.target_labeled, b.target_labeled)
            and same_labeled(a.target_test, b.target_test)
            and np.array_equal(a.target_unlabeled.ids, b.target_unlabeled.ids)
            and np.array_equal(a.target_unlabeled.X, b.target_unlabeled.X)
            and np.array_equal(a_ids, b_ids) and np.array_equal(a_labels, b_labels))
