"""
Top-k baseline: every GQA group keeps the k chunks with the highest mean
softmax score and attends to them, unbiased, together with the diagonal
branch.
"""
import numpy as np

from dashattn.algorithms.interface import AttenderInterface
from dashattn.attend import masked_attention_row, topk_attention
from dashattn.route import n_visible_chunks

__all__ = ["Attender"]


class Attender(AttenderInterface):
    def process(self):
        """Main process.

        Returns
        -------
        O: np.array(n, h_q, d_h)
            Attention output.
        stats: dict
            Work statistics of the selected chunks.
        """
        self._preprocess()
        stats = {}
        O, self.mask = topk_attention(self.Q, self.K, self.V, self.q_bar,
                                      self.attn_config, self.config["k"],
                                      n_jobs=self.n_jobs, stats=stats)
        return self._postprocess(O, self.mask, stats["blocks_visited"])

    def oracle(self):
        if not hasattr(self, "mask"):
            self.process()
        c = self.attn_config
        B = c.block_size
        bits = self.mask.to_dense()
        O = np.zeros(np.shape(self.Q))
        for i in range(c.n):
            start = int(n_visible_chunks(i, c)) * B
            for r in range(c.h_kv):
                keep = np.zeros(i + 1, dtype=bool)
                keep[start:] = True
                for ch in np.flatnonzero(bits[i, r]):
                    keep[ch * B:(ch + 1) * B] = True
                bias = np.where(keep, 0., -np.inf)
                for h in range(r * c.g_q, (r + 1) * c.g_q):
                    O[i, h] = masked_attention_row(self.Q[i, h],
                                                   self.K[:i + 1, r],
                                                   self.V[:i + 1, r], bias)
        return O
