"""
Entmax-routed attention: chunk summaries, entmax routing shared by each
GQA group and block-sparse attention with the routing prior folded into
the logits.
"""
import numpy as np

from dashattn.algorithms.interface import AttenderInterface
from dashattn.attend import (masked_attention_row, pipeline_forward,
                             prior_attention_reference)

__all__ = ["Attender"]


class Attender(AttenderInterface):
    def process(self):
        """Main process.

        Returns
        -------
        O: np.array(n, h_q, d_h)
            Attention output.
        stats: dict
            Work statistics of the routed mask.
        """
        self._preprocess()
        O, self.trace = pipeline_forward(self.Q, self.K, self.V, self.q_bar,
                                         self.attn_config,
                                         form=self.config["form"],
                                         n_jobs=self.n_jobs)
        return self._postprocess(O, self.trace.routes.mask,
                                 self.trace.stats["blocks_visited"])

    def oracle(self):
        """Dense softmax over positions 0..i with the routing prior (or its
        bias) applied token by token."""
        if not hasattr(self, "trace"):
            self.process()
        c = self.attn_config
        table = self.trace.routes
        form = self.config["form"]
        O = np.zeros(np.shape(self.Q))
        for i in range(c.n):
            for r in range(c.h_kv):
                route = table.result(i, r)
                if form == "prior":
                    g = route.token_prior()
                else:
                    g = route.token_bias()
                    if form == "uniform":
                        g = np.where(np.isfinite(g), 0., -np.inf)
                Ki, Vi = self.K[:i + 1, r], self.V[:i + 1, r]
                for h in range(r * c.g_q, (r + 1) * c.g_q):
                    if form == "prior":
                        z = np.dot(Ki, self.Q[i, h]) / np.sqrt(c.d_h)
                        O[i, h] = prior_attention_reference(z, g, Vi)
                    else:
                        O[i, h] = masked_attention_row(self.Q[i, h], Ki, Vi,
                                                       g)
        return O
