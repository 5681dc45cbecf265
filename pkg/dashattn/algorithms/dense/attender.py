"""
Exact causal attention over every earlier token, tiled over query rows.
"""
import numpy as np

from dashattn.algorithms.interface import AttenderInterface
from dashattn.attend import dense_attention, masked_attention_row

__all__ = ["Attender"]


class Attender(AttenderInterface):
    def process(self):
        """Main process.

        Returns
        -------
        O: np.array(n, h_q, d_h)
            Attention output.
        stats: dict
            Work statistics (no block is skipped).
        """
        self._preprocess()
        O = dense_attention(self.Q, self.K, self.V, causal=True,
                            tile=self.config["tile"])
        return self._postprocess(O)

    def oracle(self):
        c = self.attn_config
        O = np.zeros(np.shape(self.Q))
        for i in range(c.n):
            for h in range(c.h_q):
                r = h // c.g_q
                O[i, h] = masked_attention_row(self.Q[i, h], self.K[:i + 1, r],
                                               self.V[:i + 1, r],
                                               np.zeros(i + 1))
        return O
