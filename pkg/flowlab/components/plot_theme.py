"""
Plot Theme Component
Colour palette and matplotlib settings shared by every rendered figure.
"""

from matplotlib.colors import LinearSegmentedColormap


class PlotTheme:
    """Manages the light report theme used for SVG output"""

    def __init__(self):
        self.colors = {
            'bg': '#ffffff',            # Figure background
            'fg': '#222222',            # Text and axes
            'grid': '#d9d9d9',          # Grid lines
            'accent': '#4a9eff',        # Primary series
            'series': [                 # Cycle for multi-series plots
                '#4a9eff', '#e4572e', '#29bf12', '#a846a0', '#f3a712', '#2e4057',
            ],
            'fit': '#e4572e',           # Fitted lines
            'reference': '#808080',     # Expected slopes and bounds
            'heat_low': '#f7fbff',      # Heat map, probability 0
            'heat_high': '#08306b',     # Heat map, probability 1
        }
        self.rc = {
            'svg.hashsalt': 'flowlab',
            'svg.fonttype': 'path',
            'font.size': 10,
            'axes.titlesize': 11,
            'axes.labelsize': 10,
            'legend.fontsize': 9,
            'axes.grid': True,
            'grid.alpha': 0.6,
            'lines.linewidth': 1.5,
            'path.simplify': False,
        }

    def apply(self, figure, axes):
        """Apply theme colours to a figure and its axes"""
        figure.patch.set_facecolor(self.colors['bg'])
        for ax in axes:
            ax.set_facecolor(self.colors['bg'])
            ax.grid(True, color=self.colors['grid'])
            for spine in ax.spines.values():
                spine.set_color(self.colors['fg'])
            ax.tick_params(colors=self.colors['fg'])
            ax.xaxis.label.set_color(self.colors['fg'])
            ax.yaxis.label.set_color(self.colors['fg'])
            ax.title.set_color(self.colors['fg'])

    def series_color(self, index: int) -> str:
        palette = self.colors['series']
        return palette[index % len(palette)]

    def heat_map(self) -> LinearSegmentedColormap:
        return LinearSegmentedColormap.from_list(
            'flowlab_heat', [self.colors['heat_low'], self.colors['heat_high']]
        )

    def get_colors(self):
        """Get the colour dictionary"""
        return dict(self.colors)
