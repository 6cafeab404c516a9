"""
Register layouts
================

A layout says which thread holds which element of a tile, and in which of
its local slots. Small layouts compose into the fragments that tensor core
instructions expect.
"""

# %%
from tilevm.layout import column_spatial, local, parse_layout, render_grid, spatial

# %%
# ``local`` keeps everything in one thread, ``spatial`` gives one element to each thread.
print(render_grid(local(2, 3)))
print()
print(render_grid(spatial(2, 3)))

# %%
# Composition nests the right layout inside every cell of the left one.
c = local(2, 1) * spatial(8, 4) * local(1, 2)
print(c, c.shape, c.num_threads, "threads,", c.num_locals, "slots each")
print(render_grid(c))

# %%
# Thread 5, slot 2 sits at row 9, column 2.
print(c(5, 2))

# %%
# Division peels a known inner layout back off.
print(c / (spatial(8, 4) * local(1, 2)))
print(parse_layout("local(2,4)") / local(1, 2))

# %%
# The B fragment of an m16n8k16 mma walks threads down columns.
b = local(2, 1) * column_spatial(4, 8) * local(2, 1)
print(b.to_dict())
