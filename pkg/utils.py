import hashlib
import json
import logging
import os

import numpy as np
import pandas as pd
from scipy.stats import norm
from slugify import slugify

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


def weighted_mean(values, weights):
    """Weighted average along the first axis."""
    values = np.asarray(values, dtype=float)
    return np.tensordot(np.asarray(weights, dtype=float), values, axes=(0, 0))


def weighted_se(values, weights):
    """
    Standard error of a weighted mean of scalar terms.

    Uses Σ w_i² (v_i - v̄)² with an n/(n-1) correction, which reduces to
    s/√M for equal weights.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    count = values.shape[0]
    if count < 2:
        return 0.0
    centred = values - np.dot(weights, values)
    variance = np.sum(weights ** 2 * centred ** 2) * count / (count - 1)
    return float(np.sqrt(variance))


def weighted_sd(values, weights):
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    centred = values - np.dot(weights, values)
    return float(np.sqrt(np.dot(weights, centred ** 2)))


def log_mean_ratio(log_terms, weights, exact=False):
    """
    Estimate log Σ w_i exp(d_i) and its delta-method standard error.

    The shifted terms are divided by the total weight so identical
    parameters give exactly zero.
    """
    log_terms = np.asarray(log_terms, dtype=float)
    weights = np.asarray(weights, dtype=float)
    shift = np.max(log_terms)
    terms = np.exp(log_terms - shift)
    mean = (weights * terms).sum() / weights.sum()
    estimate = float(shift + np.log(mean))
    if exact:
        return estimate, 0.0
    return estimate, weighted_se(terms, weights) / mean


def wald_z(level):
    """Two-sided standard normal quantile for a confidence level in (0, 1)."""
    if not 0 < level < 1:
        raise ValueError(f'confidence level must lie in (0, 1), got {level}')
    return float(norm.ppf(0.5 + 0.5 * level))


def symmetrize(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)


def symmetric_inverse(matrix):
    """Inverse of the symmetric part of matrix, symmetrized; raises LinAlgError when singular."""
    inverse = np.linalg.inv(symmetrize(matrix))
    return symmetrize(inverse)


def floor_eigenvalues(matrix, relative_floor=1e-6):
    """
    Clamp eigenvalues of a symmetric matrix at relative_floor * trace / p.

    Returns the repaired matrix and whether any eigenvalue was raised.
    """
    matrix = symmetrize(matrix)
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    floor = relative_floor * abs(np.trace(matrix)) / matrix.shape[0]
    if floor <= 0:
        floor = relative_floor
    engaged = bool(np.any(eigenvalues < floor))
    if engaged:
        eigenvalues = np.maximum(eigenvalues, floor)
        matrix = symmetrize((eigenvectors * eigenvalues) @ eigenvectors.T)
    return matrix, engaged


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def output_name(*parts, suffix='csv'):
    """File name for an output table, e.g. output_name('booth-hobert', 'seed', 3)."""
    stem = slugify('-'.join(str(part) for part in parts if part != ''))
    return f'{stem}.{suffix}'


def write_table(frame, path):
    """Write a table as CSV with 17 significant digits so floats round-trip."""
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.debug(f'Wrote {len(frame)} rows to {path}')
    return path


def read_table(path):
    return pd.read_csv(path, keep_default_na=True, float_precision='round_trip')


def write_json(document, path):
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(document, handle, sort_keys=True, indent=2)
        handle.write('\n')
    return path


def read_json(path):
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)
