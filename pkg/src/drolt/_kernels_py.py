"""Pure-numpy reference kernels.

Used when the compiled extension is unavailable, or when
``DROLT_PURE_PYTHON=1`` is set.  The compiled module exposes the same
functions with identical signatures.
"""

import numpy as np


def pairwise_distances(centroids, embeddings):
    """Euclidean distance matrix of shape (n_centroids, n_samples)."""
    diff = centroids[:, None, :] - embeddings[None, :, :]
    return np.sqrt(np.einsum("cjk,cjk->cj", diff, diff))


def margin_loss(embeddings, labels, centroids, eps, weights, sign, need_grad):
    """Shifted contrastive-centroid loss and its gradients.

    For every sample ``i`` of class ``c`` the per-sample term is

        d(mu_c, z_i) + 2*sign*eps_c + logsumexp_j(-d(mu_c, z_j) - 2*sign*eps_c*[y_j == c])

    ``sign=+1`` gives the robust upper bound, ``sign=-1`` the lower bound and
    ``eps == 0`` the plain NLL.  The value is ``sum_i weights[y_i] * term_i``.

    Returns ``(value, per_sample, grad_z, grad_mu, grad_eps)``; the gradient
    arrays are ``None`` when ``need_grad`` is false.
    """
    n_classes = centroids.shape[0]
    n = embeddings.shape[0]

    dist = pairwise_distances(centroids, embeddings)
    same = labels[None, :] == np.arange(n_classes)[:, None]
    shift = 2.0 * sign * eps
    scores = -dist - shift[:, None] * same
    row_max = scores.max(axis=1, keepdims=True)
    expd = np.exp(scores - row_max)
    row_sum = expd.sum(axis=1, keepdims=True)
    lse = (row_max + np.log(row_sum))[:, 0]

    idx = np.arange(n)
    per_sample = dist[labels, idx] + shift[labels] + lse[labels]
    value = float(np.dot(weights[labels], per_sample))
    if not need_grad:
        return value, per_sample, None, None, None

    # dL/dscores[c, j] = W_c * softmax_c(j) - w_c * [y_j == c]
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    row_weight = weights * counts
    prob = expd / row_sum
    g_scores = row_weight[:, None] * prob - weights[:, None] * same
    g_dist = -g_scores

    safe = np.where(dist > 0.0, dist, 1.0)
    coef = np.where(dist > 0.0, g_dist / safe, 0.0)
    # d dist[c,j] / d z_j = (z_j - mu_c) / dist
    grad_z = coef.sum(axis=0)[:, None] * embeddings - coef.T @ centroids
    grad_mu = coef.sum(axis=1)[:, None] * centroids - coef @ embeddings
    grad_eps = -2.0 * sign * (g_scores * same).sum(axis=1)
    return value, per_sample, grad_z, grad_mu, grad_eps


def nearest_centroid(centroids, points):
    """Index of the nearest centroid per point; ties go to the lowest index."""
    diff = centroids[:, None, :] - points[None, :, :]
    return np.argmin(np.einsum("cjk,cjk->cj", diff, diff), axis=0)
