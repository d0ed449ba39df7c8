"""Step 05: トークン空間の比較手法 - テストモジュール

このステップでは、アニーリング、順位ベースの勾配推定、ゼロ次最適化と
ガウス山登り法の1ラウンドを確認します。
"""
