"""Route modules for corpus generation, synthesis and evaluation."""
