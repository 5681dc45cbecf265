"""Config for dense attention."""
import dashattn

config = {
    "tile": dashattn.config.attention.tile
}

algo_id = "dense"
is_sparse = False
