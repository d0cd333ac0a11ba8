"""sizelink: link-time code size optimization for an AArch64 subset.

The linker pipeline applies three size passes over a simplified relocatable
object format: frame-code outlining, general sequence outlining, and safe
identical code folding, while keeping branch targets, exception tables, and
debug-line metadata consistent. A bundled interpreter checks that optimized
and unoptimized links behave identically.
"""

__version__ = "0.1.0"
