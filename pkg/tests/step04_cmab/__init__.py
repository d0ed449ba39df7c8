"""Step 04: 文脈付きバンディット - テストモジュール

このステップでは、アームごとのリッジ回帰、予測行列、UCB / ε-greedy / Thompson
による選択、スナップショットの保存・読み込みを確認します。
"""
