"""Interface for all the attention modes in dashattn."""
import numpy as np

from dashattn.diagnostics import mask_token_counts
from dashattn.exceptions import ShapeError
from dashattn.route import BlockMask, diagonal_chunks, n_visible_chunks


class AttenderInterface(object):
    """This class is an interface for all the attention modes included in
    dashattn. Modes must inherit from it and implement:
            process()
            oracle()

    `process` returns the attention output together with a dictionary of
    work statistics; `oracle` recomputes the same output the slow way, one
    query row at a time, so `--verify` can compare both.

    Additionally, two private helpers are provided:
        - _preprocess
        - _postprocess

    These are meant to do common tasks for all the modes and they should
    be called inside `process` if needed.
    """
    def __init__(self, Q, K, V, q_bar, attn_config, n_jobs=1, **config):
        """Inits the Attender.

        Parameters
        ----------
        Q: np.array(n, h_q, d_h)
            Queries.
        K, V: np.array(n, h_kv, d_h)
            Keys and values.
        q_bar: np.array(h_kv, d_h)
            Summary queries (unused by dense attention).
        attn_config: `dashattn.summarize.AttnConfig`
            Shapes and routing hyperparameters.
        n_jobs: int
            joblib workers.
        config: dict
            Configuration of the mode (see the mode's config.py).
        """
        self.Q = Q
        self.K = K
        self.V = V
        self.q_bar = q_bar
        self.attn_config = attn_config
        self.n_jobs = n_jobs
        self.config = config

    def process(self):
        """Main process: returns (O, stats)."""
        raise NotImplementedError("This mode does not implement attention.")

    def oracle(self):
        """Row-by-row recomputation of `process`'s output."""
        raise NotImplementedError("This mode has no oracle.")

    def _preprocess(self):
        """Checks the input shapes against the attention configuration."""
        c = self.attn_config
        expected = {"Q": (c.n, c.h_q, c.d_h), "K": (c.n, c.h_kv, c.d_h),
                    "V": (c.n, c.h_kv, c.d_h), "q_bar": (c.h_kv, c.d_h)}
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError("%s has shape %s, expected %s" %
                                 (name, np.shape(getattr(self, name)), shape))

    def _postprocess(self, O, mask=None, blocks_visited=None):
        """Work statistics shared by every mode.

        Parameters
        ----------
        O: np.array(n, h_q, d_h)
            Attention output.
        mask: `dashattn.route.BlockMask` or None
            Routed chunks; None means every visible chunk (dense).
        blocks_visited: int or None
            Blocks read by the sparse path (all visible blocks if None).

        Returns
        -------
        O: np.array(n, h_q, d_h)
        stats: dict
            n, B, blocks_visible, blocks_visited, measured_sparsity and
            mean_support.
        """
        c = self.attn_config
        positions = np.arange(c.n)
        n_vis = n_visible_chunks(positions, c)
        n_diag_chunks = np.array([len(diagonal_chunks(i, c))
                                  for i in positions])
        blocks_visible = int((n_vis + n_diag_chunks).sum()) * c.h_kv
        if mask is None:
            bits = np.arange(c.n_chunks)[None, :] < n_vis[:, None]
            mask = BlockMask.from_dense(np.repeat(bits[:, None, :], c.h_kv,
                                                  axis=1))
        attended, visible, support = mask_token_counts(mask, n_vis, c)
        stats = {
            "n": c.n,
            "B": c.block_size,
            "blocks_visible": blocks_visible,
            "blocks_visited": blocks_visible if blocks_visited is None
            else int(blocks_visited),
            "measured_sparsity": 1 - attended.sum() /
            float(visible * c.h_kv),
            "mean_support": float(support.mean())}
        return O, stats
